"""Command-line entry points.

Subcommands: gen (teacher + dataset), train (full pipeline), render
(checkpoint + pose -> images), eval (checkpoint + split -> report), ablate
(preset grids), serve (HTTP). Machine-readable JSON goes to stdout or --out;
errors exit nonzero with a structured JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _emit(obj: dict, out: str | None):
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).write_text(text)
    else:
        print(text)


def _fail(code: str, message: str) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return 1


def _load_config(path: str | None, overrides: dict):
    from .trainer import TrainConfig

    base = json.loads(Path(path).read_text()) if path else {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)


def cmd_gen(args) -> int:
    from .scenegen import make_dataset, make_teacher_scene
    from .storage import save_dataset

    teacher = make_teacher_scene(args.seed, num_classes=args.classes,
                                 num_gaussians=args.teacher_points)
    ds = make_dataset(teacher, n_train=args.train_views,
                      n_augment_per_view=args.augment_per_view,
                      n_test=args.test_views, corruption=args.corruption,
                      seed=args.seed, width=args.size, height=args.size,
                      seed_mode=args.seed_mode, seed_count=args.seed_count,
                      seed_outlier_fraction=args.outlier_fraction)
    save_dataset(ds, args.out)
    _emit({"dataset": str(args.out), "train": len(ds.train_views),
           "augmented": len(ds.augmented_views), "test": len(ds.test_views),
           "seed_points": len(ds.seed_points), "classes": ds.bank.names}, None)
    return 0


def cmd_train(args) -> int:
    from .storage import load_dataset, save_checkpoint
    from .trainer import run_pipeline

    ds = load_dataset(args.dataset)
    cfg = _load_config(args.config, {"seed": args.seed})
    log_path = Path(args.out).with_suffix(".log.jsonl") if args.out else None
    ckpt, log = run_pipeline(ds, cfg, log_path=log_path)
    save_checkpoint(args.out, ckpt.scene, ckpt.heads, ckpt.bank,
                    ckpt.config, ckpt.iteration)
    _emit({"checkpoint": str(args.out), "iterations": ckpt.iteration,
           "num_gaussians": len(ckpt.scene),
           "log": str(log_path) if log_path else None}, None)
    return 0


def cmd_render(args) -> int:
    from .geometry import Camera
    from .rasterizer import render
    from .storage import load_checkpoint, save_image

    ck = load_checkpoint(args.checkpoint)
    if args.pose:
        pose = json.loads(Path(args.pose).read_text())
    else:
        pose = json.loads(sys.stdin.read())
    cam = Camera(pose["fx"], pose["fy"], pose["cx"], pose["cy"],
                 pose["width"], pose["height"],
                 np.array(pose["w2c"], dtype=np.float64).reshape(4, 4))
    out = render(cam, ck.scene, np.zeros(3))
    save_image(args.out, np.clip(out.color, 0, 1))
    label_path = None
    if ck.heads is not None and ck.bank is not None:
        from .metrics import predict_labels
        from .storage import save_labels

        label_path = str(Path(args.out).with_suffix(".labels.u16"))
        save_labels(label_path, predict_labels(out.feature, ck.heads, ck.bank))
    _emit({"image": str(args.out), "labels": label_path}, None)
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_views
    from .storage import load_checkpoint, load_dataset

    ck = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    views = {"test": ds.test_views, "train": ds.train_views}[args.split]
    report = evaluate_views(ck.scene, ck.heads, ck.bank, views)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_preset

    results = run_preset(args.preset, seeds=args.seeds, size=args.size,
                         phase_iters=args.iters)
    _emit(results, args.out)
    return 0


def cmd_serve(args) -> int:
    from .service import RenderService, serve_forever
    from .storage import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    if ck.heads is None or ck.bank is None:
        return _fail("bad_checkpoint", "checkpoint lacks heads/text bank sections")
    size = ck.config.get("image_size", [96, 96])
    service = RenderService(ck.scene, ck.heads, ck.bank, image_size=tuple(size))
    serve_forever(service, args.port)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="semsplat")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic teacher dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--teacher-points", type=int, default=9000)
    g.add_argument("--train-views", type=int, default=12)
    g.add_argument("--augment-per-view", type=int, default=8)
    g.add_argument("--test-views", type=int, default=24)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--corruption", type=float, default=0.0)
    g.add_argument("--seed-mode", choices=["sparse", "dense", "random"], default="dense")
    g.add_argument("--seed-count", type=int, default=6000)
    g.add_argument("--outlier-fraction", type=float, default=0.0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run the two-phase pipeline")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON TrainConfig overrides")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint at a pose")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--pose", help="JSON pose file (defaults to stdin)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation preset grid")
    a.add_argument("--preset", required=True,
                   choices=["seed_density", "consistency", "aug_color",
                            "outlier_removal", "erosion"])
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--size", type=int, default=64)
    a.add_argument("--iters", type=int, default=600)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("serve", help="HTTP render/query service")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--port", type=int, default=8090)
    s.set_defaults(func=cmd_serve)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        return _fail("not_found", str(e))
    except Exception as e:  # structured failure surface for scripts
        return _fail(type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
