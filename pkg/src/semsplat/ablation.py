"""Reduced-scale ablation arms mirroring the headline training trends.

Each arm builds a synthetic dataset, runs the two-phase pipeline with one
switch flipped, and scores the held-out split. Presets:

  seed_density     dense vs sparse initial points
  consistency      cross-view consistency regularization on vs off
  aug_color        color supervision from augmented views on vs off
                   (augmented colors carry a deliberate low-frequency shift)
  outlier_removal  isolated-point removal on vs off with 10% random seeds
  erosion          region boundary erosion kernel size sweep
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .metrics import evaluate_views
from .scenegen import make_dataset, make_teacher_scene
from .trainer import TrainConfig, run_pipeline, scaled_config


def ablation_config(phase_iters: int, seed: int, **overrides) -> TrainConfig:
    cfg = scaled_config(TrainConfig(), phase_iters, phase_iters)
    return replace(cfg, seed=seed, **overrides)


def run_arm(seed: int, size: int = 64, phase_iters: int = 600,
            teacher_points: int = 4500, seed_mode: str = "dense",
            seed_count: int = 2500, corruption: float = 0.0,
            outlier_fraction: float = 0.0, n_test: int = 8,
            **config_overrides) -> dict:
    """One pipeline run -> held-out metrics dict."""
    if seed_mode == "sparse":
        seed_count = max(150, seed_count // 10)
    teacher = make_teacher_scene(seed, num_classes=8, num_gaussians=teacher_points)
    ds = make_dataset(teacher, n_test=n_test, corruption=corruption, seed=seed,
                      width=size, height=size, seed_mode=seed_mode,
                      seed_count=seed_count, seed_outlier_fraction=outlier_fraction)
    cfg = ablation_config(phase_iters, seed, **config_overrides)
    ckpt, _ = run_pipeline(ds, cfg)
    rep = evaluate_views(ckpt.scene, ckpt.heads, ckpt.bank, ds.test_views)
    return {"psnr": rep.mean_psnr, "ssim": rep.mean_ssim,
            "miou": rep.miou, "macc": rep.macc,
            "n_gaussians": len(ckpt.scene)}


PRESETS = {
    "seed_density": [
        ("dense", dict(seed_mode="dense")),
        ("sparse", dict(seed_mode="sparse")),
    ],
    "consistency": [
        ("on", dict(spc_enabled=True)),
        ("off", dict(spc_enabled=False)),
    ],
    "aug_color": [
        ("off", dict(corruption=0.2, aug_color_loss=False)),
        ("on", dict(corruption=0.2, aug_color_loss=True)),
    ],
    "outlier_removal": [
        ("on", dict(outlier_fraction=0.10, ogr_enabled=True)),
        ("off", dict(outlier_fraction=0.10, ogr_enabled=False)),
    ],
    "erosion": [(f"k{k}", dict(erosion_kernel=k)) for k in (1, 3, 5, 7, 9)],
}

_DATASET_KEYS = {"seed_mode", "corruption", "outlier_fraction"}


def run_preset(preset: str, seeds: int = 3, size: int = 64,
               phase_iters: int = 600, runner=None) -> dict:
    """Run every arm of a preset over `seeds` scene seeds; report per-seed
    metrics and means. `runner` lets tests substitute a parallel executor."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    runner = runner or (lambda jobs: [f(*a, **k) for f, a, k in jobs])
    arms = PRESETS[preset]
    jobs = []
    for name, params in arms:
        for seed in range(seeds):
            kw = dict(seed=seed, size=size, phase_iters=phase_iters)
            for k, v in params.items():
                kw[k] = v
            jobs.append((run_arm, (), kw))
    flat = runner(jobs)
    out = {"preset": preset, "seeds": seeds, "size": size,
           "phase_iters": phase_iters, "arms": {}}
    i = 0
    for name, _ in arms:
        per_seed = flat[i:i + seeds]
        i += seeds
        out["arms"][name] = {
            "per_seed": per_seed,
            "mean": {k: float(np.mean([r[k] for r in per_seed]))
                     for k in ("psnr", "ssim", "miou", "macc")},
        }
    return out
