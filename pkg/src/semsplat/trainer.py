"""Two-phase training loop.

Phase 1 optimizes from the seed points under the full loss with
densification and isolated-point removal, then exports the resulting point
layout. Phase 2 re-initializes from that layout (positions, base color,
features kept; everything else reset) and trains the final field.

Determinism contract: given the same seed, config, and dataset, the final
checkpoint is bitwise identical on the same platform. All randomness flows
through one generator per phase, drawn in a fixed order.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import GaussianSet
from .heads import HeadGrads, SemanticHeads, TextBank, segmentation_logits
from .layout import (
    DensifyConfig,
    DensifyStats,
    OutlierRemovalConfig,
    densify_and_prune,
    extract_layout,
    reinit_from_layout,
    remove_isolated,
)
from .losses import (
    SupervisionMaps,
    lambda_weight,
    loss_color,
    loss_contrastive,
    loss_generated_semantic,
    loss_inter_view,
    loss_local_adaptive,
    loss_region_kl,
    loss_semantic,
    loss_total,
)
from .optim import Adam
from .rasterizer import RenderGrads, render, render_backward
from .regions import Segmenter, erode_mask, propose_region_masks, sample_pseudo_views
from .scenegen import SceneDataset

SCENE_PARAM_KEYS = ["positions", "sh_coeffs", "opacity_logits", "log_scales",
                    "rotations", "features"]
HEAD_PARAM_KEYS = ["w_f", "b_f", "w_s", "b_s", "w_psi", "b_psi"]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, components: dict):
        self.iteration = iteration
        self.components = components
        super().__init__(f"non-finite loss at iteration {iteration}: {components}")


@dataclass
class TrainConfig:
    phase1_iters: int = 10000
    phase2_iters: int = 10000
    lr_semantic: float = 0.0025
    lr_heads: float = 0.0005
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    sh_rest_lr_scale: float = 0.05
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lambda_warmup: int = 4000
    lambda_warmup_global: bool = False  # per-phase counter by default
    spc_enabled: bool = True
    spc_in_phase1: bool = True
    aug_color_loss: bool = False  # generated-view color supervision (ablation arm)
    ogr: OutlierRemovalConfig = field(default_factory=OutlierRemovalConfig)
    ogr_enabled: bool = True
    ogr_in_phase2: bool = False
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed: int = 0
    sh_degree: int = 3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pseudo_count: int = 2
    pseudo_noise: float = 0.1
    erosion_kernel: int = 5
    contrastive_patch: int = 32
    contrastive_cap: int = 1024
    local_adaptive_samples: int = 800
    local_adaptive_neighbors: int = 5
    init_opacity: float = 0.1
    log_interval: int = 100

    def __post_init__(self):
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        for name in ("lr_semantic", "lr_heads", "lr_position", "lr_sh",
                     "lr_opacity", "lr_scale", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "ogr" in d and isinstance(d["ogr"], dict):
            d["ogr"] = OutlierRemovalConfig(**d["ogr"])
        if "densify" in d and isinstance(d["densify"], dict):
            d["densify"] = DensifyConfig(**d["densify"])
        if "background" in d:
            d["background"] = tuple(d["background"])
        return TrainConfig(**d)


def scaled_config(cfg: TrainConfig, phase1_iters: int, phase2_iters: int) -> TrainConfig:
    """Shrink the phase budgets with every iteration-denominated schedule
    (warmup, densify window, removal interval) scaled proportionally."""
    f = phase1_iters / max(cfg.phase1_iters, 1)
    return replace(
        cfg,
        phase1_iters=phase1_iters,
        phase2_iters=phase2_iters,
        lambda_warmup=max(1, int(round(cfg.lambda_warmup * f))),
        densify=replace(cfg.densify,
                        start=max(1, int(round(cfg.densify.start * f))),
                        until=max(1, int(round(cfg.densify.until * f)))),
        ogr=replace(cfg.ogr, interval=max(1, int(round(cfg.ogr.interval * f)))),
    )


@dataclass
class Checkpoint:
    scene: GaussianSet
    heads: SemanticHeads
    bank: TextBank
    config: dict
    iteration: int


def _scene_params(scene: GaussianSet) -> dict[str, np.ndarray]:
    return {k: getattr(scene, k) for k in SCENE_PARAM_KEYS}


def _head_params(heads: SemanticHeads) -> dict[str, np.ndarray]:
    return {k: getattr(heads, k) for k in HEAD_PARAM_KEYS}


def _lrs(cfg: TrainConfig, scene: GaussianSet, it: int, total: int) -> dict:
    decay = (cfg.lr_position_final / cfg.lr_position) ** (it / max(total, 1))
    k = scene.sh_coeffs.shape[1]
    sh_lr = np.full((k, 1), cfg.lr_sh * cfg.sh_rest_lr_scale)
    sh_lr[0] = cfg.lr_sh
    return {
        "positions": cfg.lr_position * decay,
        "sh_coeffs": sh_lr,
        "opacity_logits": cfg.lr_opacity,
        "log_scales": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "features": cfg.lr_semantic,
        **{k2: cfg.lr_heads for k2 in HEAD_PARAM_KEYS},
    }


def train_phase(scene: GaussianSet, heads: SemanticHeads, dataset: SceneDataset,
                cfg: TrainConfig, phase: int, rng: np.random.Generator,
                segmenter: Segmenter, log: list | None = None,
                scene_extent: float | None = None):
    """Run one optimization phase in place. Returns (scene, heads)."""
    bank = dataset.bank
    bg = np.asarray(cfg.background, dtype=np.float64)
    iters = cfg.phase1_iters if phase == 1 else cfg.phase2_iters
    extent = scene_extent if scene_extent is not None else dataset.extent
    train_views = dataset.train_views
    aug_views = dataset.augmented_views
    train_cams = [v.camera for v in train_views]
    sups = [SupervisionMaps(v.labels, bank.embeddings) for v in train_views]
    aug_sups = [SupervisionMaps(v.labels, bank.embeddings) for v in aug_views]

    opt = Adam({**_scene_params(scene), **_head_params(heads)})
    stats = DensifyStats.zeros(len(scene))
    auto_mask_cache: dict[int, list[np.ndarray]] = {}

    for it in range(iters):
        lam_iter = it + (cfg.phase1_iters if (phase == 2 and cfg.lambda_warmup_global) else 0)
        lam = lambda_weight(lam_iter, cfg.lambda_warmup)
        spc_on = (cfg.spc_enabled and lam > 0.0
                  and (phase == 2 or cfg.spc_in_phase1))

        vi = it % len(train_views)
        view = train_views[vi]
        out = render(view.camera, scene, bg)
        c_val, c_g = loss_color(out.color, view.image)
        logits = segmentation_logits(out.feature, heads, bank)
        s_val, s_g = loss_semantic(out.feature, logits, sups[vi], heads, bank)
        d_img = c_g["image"]
        d_feat = s_g["feature_img"]
        head_g = HeadGrads.zeros(heads).add(s_g["heads"])
        components = {"color": c_val, "semantic": s_val}
        skipped_spc = False

        extra_feat_grads = np.zeros(scene.features.shape)
        extra_pos_grads = np.zeros((len(scene), 3))
        pseudo_jobs = []  # (camera, d_feature) for backward renders

        if spc_on:
            auto = auto_mask_cache.get(vi)
            if auto is None:
                auto = segmenter.auto_masks(view.camera)
                auto_mask_cache[vi] = auto
            i_val, i_g = loss_contrastive(
                out.feature, logits, auto, heads, rng,
                patch_size=(cfg.contrastive_patch, cfg.contrastive_patch),
                max_samples=cfg.contrastive_cap)
            components["contrastive"] = i_val
            d_feat += lam * i_g["feature_img"]
            head_g.add(i_g["heads"])

            pseudo = sample_pseudo_views(train_cams, vi, cfg.pseudo_noise, rng,
                                         cfg.pseudo_count)
            pouts = [render(pc.camera, scene, bg) for pc in pseudo]
            masks = propose_region_masks(vi, view.camera, pseudo, segmenter, rng)
            v_val, v_g = loss_inter_view(out, pouts, masks, heads, bank)
            components["inter_view"] = v_val
            head_g.add(v_g["heads"])
            er_train = erode_mask(masks.train_mask, cfg.erosion_kernel)
            er_pseudo = [erode_mask(m, cfg.erosion_kernel) for m in masks.pseudo_masks]
            k_val, k_g = loss_region_kl(out, pouts, er_train, er_pseudo, scene)
            components["region_kl"] = k_val
            extra_feat_grads += lam * k_g["features"]
            skipped_spc = bool(v_g["skipped"] or k_g["skipped"])
            for pc, po, dpf in zip(pseudo, pouts, v_g["pseudo_feature_imgs"]):
                pseudo_jobs.append((pc.camera, po, lam * dpf))

        ai = it % len(aug_views)
        aug = aug_views[ai]
        aout = render(aug.camera, scene, bg)
        alogits = segmentation_logits(aout.feature, heads, bank)
        g_val, g_g = loss_generated_semantic(aout.feature, alogits, aug_sups[ai],
                                             heads, bank)
        components["generated_semantic"] = g_val
        head_g.add(g_g["heads"])
        d_aug_img = np.zeros(aout.color.shape)
        if cfg.aug_color_loss:
            gc_val, gc_g = loss_color(aout.color, aug.image)
            components["generated_color"] = gc_val
            d_aug_img = gc_g["image"]

        la_val, la_g = loss_local_adaptive(scene, rng,
                                           cfg.local_adaptive_samples,
                                           cfg.local_adaptive_neighbors)
        components["local_adaptive"] = la_val
        extra_feat_grads += la_g["features"]
        extra_pos_grads += la_g["positions"]

        total = loss_total(components, lam_iter, cfg.lambda_warmup) \
            + components.get("generated_color", 0.0)
        if not np.isfinite(total):
            raise TrainingDiverged(it, components)

        zeros_a = np.zeros((view.camera.height, view.camera.width))
        grads = render_backward(view.camera, scene, out, d_img, d_feat, zeros_a)
        grads.add(render_backward(aug.camera, scene, aout, d_aug_img,
                                  g_g["feature_img"], zeros_a))
        for cam_p, po, dpf in pseudo_jobs:
            grads.add(render_backward(cam_p, scene, po,
                                      np.zeros(po.color.shape), dpf, zeros_a))
        grads.features += extra_feat_grads
        grads.positions += extra_pos_grads

        stats.update(grads.screen_positions, grads.visible)

        opt.step({**_scene_params(scene), **_head_params(heads)},
                 {**{k: getattr(grads, k) for k in SCENE_PARAM_KEYS},
                  **{k: getattr(head_g, k) for k in HEAD_PARAM_KEYS}},
                 _lrs(cfg, scene, it, iters))
        scene.normalize_rotations()

        event = None
        dn = cfg.densify
        if (phase == 1 and dn.start <= it < dn.until and (it + 1) % dn.interval == 0):
            scene, remap = densify_and_prune(scene, stats, dn, extent, rng)
            opt.remap(SCENE_PARAM_KEYS, remap)
            stats = DensifyStats.zeros(len(scene))
            event = "densify"
        if (cfg.ogr_enabled and (phase == 1 or cfg.ogr_in_phase2)
                and (it + 1) % cfg.ogr.interval == 0):
            scene, keep_mask = remove_isolated(scene, cfg.ogr)
            if not keep_mask.all():
                remap = np.flatnonzero(keep_mask)
                opt.remap(SCENE_PARAM_KEYS, remap)
                stats = stats.select(remap)
            event = "ogr" if event is None else event + "+ogr"

        if log is not None and ((it + 1) % cfg.log_interval == 0 or event or it == 0):
            log.append({"phase": phase, "iter": it, "total": total,
                        **{k: float(v) for k, v in components.items()},
                        "lambda": lam, "n_gaussians": len(scene),
                        "skipped_spc": skipped_spc, "event": event})
    return scene, heads


def run_pipeline(dataset: SceneDataset, cfg: TrainConfig,
                 segmenter: Segmenter | None = None,
                 log_path=None) -> tuple[Checkpoint, list]:
    """Seed points -> phase 1 -> layout export -> re-init -> phase 2."""
    if not dataset.train_views:
        raise ValueError("dataset has no training views")
    if segmenter is None:
        segmenter = dataset.oracle_segmenter()
    log: list[dict] = []
    t0 = time.time()

    scene = reinit_from_layout(dataset.seed_points, cfg.sh_degree, cfg.init_opacity)
    rng_heads = np.random.default_rng([cfg.seed, 11])
    w_f_init = (dataset.feature_projection.T
                if dataset.feature_projection is not None
                and dataset.feature_projection.size else None)
    heads = SemanticHeads.create(scene.feature_dim, dataset.num_classes,
                                 rng_heads, w_f_init=w_f_init)

    rng1 = np.random.default_rng([cfg.seed, 1])
    scene, heads = train_phase(scene, heads, dataset, cfg, 1, rng1, segmenter, log)

    layout = extract_layout(scene)
    if len(layout) == 0:
        raise RuntimeError("phase 1 produced an empty layout; cannot re-initialize")
    log.append({"phase": 1, "event": "layout_export", "n_points": len(layout)})

    scene = reinit_from_layout(layout, cfg.sh_degree, cfg.init_opacity)
    rng2 = np.random.default_rng([cfg.seed, 2])
    scene, heads = train_phase(scene, heads, dataset, cfg, 2, rng2, segmenter, log)

    log.append({"event": "done", "seconds": time.time() - t0,
                "n_gaussians": len(scene)})
    if log_path is not None:
        with open(log_path, "w") as f:
            for row in log:
                f.write(json.dumps(row) + "\n")
    ckpt = Checkpoint(scene, heads, dataset.bank, cfg.to_dict(),
                      cfg.phase1_iters + cfg.phase2_iters)
    return ckpt, log
