"""Command-line surface: train, eval, visualize, ablate, gen-data.

Heavy imports happen inside ``main`` so the ``DIP_THREADS`` cap can be
applied to the numeric backend before it loads. Every report path writes
delimited output (CSV/JSON/JSONL) plus a PNG rendering of the same data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA_MISSING = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5
EXIT_UNKNOWN_AXIS = 6

ABLATION_AXES = ("losses", "dip-count", "weighting", "transform")


def _apply_thread_cap():
    cap = os.environ.get("DIP_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _add_common(p):
    from .config import RunConfig

    d = RunConfig()
    p.add_argument("--config", metavar="FILE", help="flat key=value config file")
    p.add_argument("--seed", type=int, help=f"master seed (default: {d.seed})")
    p.add_argument("--out", metavar="DIR", help="output directory (default: ./run)")
    return p


def _add_train_flags(p):
    from .config import RunConfig

    d = RunConfig()
    p.add_argument("--data", metavar="DIR", help="dataset root (default: ./data)")
    p.add_argument("--epochs", type=int, help=f"training epochs (default: {d.epochs})")
    p.add_argument("--lr", type=float, help=f"initial learning rate (default: {d.lr})")
    p.add_argument("--batch", type=int, help=f"batch size, must equal p_ids*k_imgs (default: {d.batch})")
    p.add_argument("--p-ids", type=int, dest="p_ids", help=f"identities per batch (default: {d.p_ids})")
    p.add_argument("--k-imgs", type=int, dest="k_imgs", help=f"images per identity per batch (default: {d.k_imgs})")
    p.add_argument("--dips", type=int, metavar="M", help=f"part-token count; 0 = global-feature baseline (default: {d.dips})")
    p.add_argument("--stride", type=int, metavar="S", help=f"patch stride (default: {d.stride})")
    p.add_argument("--lambda-id", type=float, dest="lambda_id", help=f"identity loss weight (default: {d.lambda_id})")
    p.add_argument("--lambda-t", type=float, dest="lambda_t", help=f"triplet loss weight (default: {d.lambda_t})")
    p.add_argument("--lambda-pe", type=float, dest="lambda_pe", help=f"position loss weight (default: {d.lambda_pe})")
    p.add_argument("--margin", type=float, help=f"triplet margin (default: {d.margin})")
    p.add_argument("--no-transform", action="store_true", help="disable the transformed-image branch")
    p.add_argument("--no-weighting", action="store_true", help="disable part weightings (uniform averaging)")
    p.add_argument("--eval-every", type=int, dest="eval_every", help=f"epochs between retrieval evals (default: {d.eval_every})")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every", help="checkpoint cadence in epochs; 0 = final only (default: 0)")
    return p


def _add_data_gen_flags(p):
    p.add_argument("--ids", type=int, help="identity count (default: 16)")
    p.add_argument("--images-per-id", type=int, dest="images_per_id",
                   help="training images per identity (default: 8)")
    p.add_argument("--query-per-id", type=int, dest="query_per_id",
                   help="query images per identity (default: 2)")
    p.add_argument("--gallery-per-id", type=int, dest="gallery_per_id",
                   help="gallery images per identity (default: 4)")
    p.add_argument("--occlusion-rate", type=float, dest="occlusion_rate",
                   help="training-split occlusion rate (default: 0.0)")
    return p


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dipnet",
        description="Part-based metric learning on synthetic identity data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and log per-epoch metrics")
    _add_common(p)
    _add_train_flags(p)
    _add_data_gen_flags(p)
    p.add_argument("--gen-data", action="store_true",
                   help="generate the synthetic dataset first if missing")
    p.add_argument("--resume", metavar="CKPT", help="resume from a checkpoint")

    p = sub.add_parser("eval", help="retrieval evaluation from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", metavar="DIR", help="dataset root with query/ and gallery/ (default: ./data)")
    p.add_argument("--query-split", default="query", help="query subdirectory name (default: query)")
    p.add_argument("--no-camera-filter", action="store_true",
                   help="keep same-camera matches in the gallery")
    p.add_argument("--distmat-csv", action="store_true",
                   help="also write the full distance matrix as CSV")

    p = sub.add_parser("visualize", help="export score maps and positions")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", metavar="DIR", help="dataset root (default: ./data)")
    p.add_argument("--split", default="query", help="split to visualize (default: query)")
    p.add_argument("--limit", type=int, default=4, help="number of images (default: 4)")

    p = sub.add_parser("ablate", help="run a configuration sweep")
    _add_common(p)
    _add_train_flags(p)
    _add_data_gen_flags(p)
    p.add_argument("--axis", required=True,
                   help=f"sweep axis, one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--seeds", default="0",
                   help="comma-separated seeds averaged per row (default: 0)")

    p = sub.add_parser("gen-data", help="render the synthetic dataset splits")
    _add_common(p)
    p.add_argument("--data", metavar="DIR", help="destination root (default: ./data)")
    _add_data_gen_flags(p)
    return parser


_CONFIG_KEYS = (
    "seed", "epochs", "lr", "batch", "p_ids", "k_imgs", "dips", "stride",
    "lambda_id", "lambda_t", "lambda_pe", "margin", "eval_every",
    "checkpoint_every", "ids", "images_per_id", "query_per_id",
    "gallery_per_id", "occlusion_rate",
)


def _run_config(args):
    from .config import build_config

    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    if getattr(args, "no_transform", False):
        overrides["transform"] = False
    if getattr(args, "no_weighting", False):
        overrides["weighting"] = False
    if getattr(args, "no_camera_filter", False):
        overrides["camera_filter"] = False
    return build_config(getattr(args, "config", None), overrides)


def _load_split(root, name):
    from . import data as dat

    path = Path(root) / name
    if not (path / "labels.csv").exists():
        return None
    return dat.load_dataset(path)


def _generate_splits(cfg, root):
    from . import data as dat

    root = Path(root)
    specs = {
        "train": dat.DataSpec(cfg.ids, cfg.images_per_id,
                              occlusion_rate=cfg.occlusion_rate, camera=0),
        "gallery": dat.DataSpec(cfg.ids, cfg.gallery_per_id, camera=2),
        "query": dat.DataSpec(cfg.ids, cfg.query_per_id, camera=1),
        "query_occluded": dat.DataSpec(cfg.ids, cfg.query_per_id,
                                       occlusion_rate=1.0, camera=1),
    }
    for name, spec in specs.items():
        ds = dat.generate_dataset(spec, cfg.seed)
        dat.save_dataset(ds, root / name)
    return root


def cmd_train(args):
    from . import data as dat
    from . import figures
    from .config import ConfigError
    from .evaluate import ConfigMismatchError
    from .train import DivergenceError, train

    try:
        cfg = _run_config(args)
        pc = cfg.patch_config()
        tc = cfg.train_config()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    data_root = Path(args.data or "data")
    out_dir = Path(args.out or "run")
    if not (data_root / "train" / "labels.csv").exists():
        if args.gen_data:
            _generate_splits(cfg, data_root)
        else:
            print(f"dataset missing under {data_root} (try --gen-data)", file=sys.stderr)
            return EXIT_DATA_MISSING
    try:
        train_ds = dat.load_dataset(data_root / "train")
    except FileNotFoundError as e:
        print(f"dataset missing: {e}", file=sys.stderr)
        return EXIT_DATA_MISSING
    query = _load_split(data_root, "query")
    gallery = _load_split(data_root, "gallery")
    try:
        _, records = train(
            train_ds, tc, pc, out_dir,
            eval_query=query, eval_gallery=gallery,
            camera_filter=cfg.camera_filter,
            resume_from=args.resume,
        )
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigMismatchError as e:
        print(f"checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except dat.InsufficientDataError as e:
        print(f"dataset too small: {e}", file=sys.stderr)
        return EXIT_DATA_MISSING
    figures.save_training_curves(out_dir / "training_curves.png", records)
    last = records[-1] if records else {}
    print(json.dumps({"epochs": len(records), "final": last}, sort_keys=True))
    return EXIT_OK


def _load_model_or_exit(path):
    from .checkpoint import CheckpointError
    from .train import load_model

    try:
        return load_model(path)
    except (CheckpointError, FileNotFoundError, OSError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return None


def cmd_eval(args):
    from . import figures
    from .config import ConfigError
    from .evaluate import (ConfigMismatchError, NoValidMatchError, cmc_map,
                           distance_matrix, extract, write_distance_csv)

    try:
        cfg = _run_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    loaded = _load_model_or_exit(args.checkpoint)
    if loaded is None:
        return EXIT_CHECKPOINT
    model, _ = loaded
    data_root = Path(args.data or "data")
    query = _load_split(data_root, args.query_split)
    gallery = _load_split(data_root, "gallery")
    if query is None or gallery is None:
        print(f"query/gallery splits missing under {data_root}", file=sys.stderr)
        return EXIT_DATA_MISSING
    out_dir = Path(args.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        q = extract(model, query.images, query.labels, query.cameras)
        g = extract(model, gallery.images, gallery.labels, gallery.cameras)
    except ConfigMismatchError as e:
        print(f"checkpoint/config mismatch: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    dist = distance_matrix(q, g)
    try:
        result = cmc_map(dist, q.labels, q.cameras, g.labels, g.cameras,
                         camera_filter=cfg.camera_filter)
    except NoValidMatchError as e:
        print(f"evaluation impossible: {e} "
              "(single-camera data? try --no-camera-filter)", file=sys.stderr)
        return EXIT_DATA_MISSING
    payload = result.to_json()
    (out_dir / "metrics.json").write_text(payload + "\n")
    figures.save_cmc_curve(out_dir / "cmc.png", result.cmc)
    if args.distmat_csv:
        write_distance_csv(out_dir / "distances.csv", dist)
    print(payload)
    return EXIT_OK


def _mark(image, row, col, color):
    H, W = image.shape[:2]
    r = int(round(row))
    c = int(round(col))
    image[max(0, r - 1):min(H, r + 2), max(0, c - 1):min(W, c + 2)] = color


def cmd_visualize(args):
    import numpy as np

    from . import figures
    from . import positions as pos
    from .data import write_ppm

    loaded = _load_model_or_exit(args.checkpoint)
    if loaded is None:
        return EXIT_CHECKPOINT
    model, _ = loaded
    if model.config.M == 0:
        print("baseline checkpoint has no part tokens to visualize", file=sys.stderr)
        return EXIT_CONFIG
    data_root = Path(args.data or "data")
    split = _load_split(data_root, args.split)
    if split is None:
        print(f"split {args.split!r} missing under {data_root}", file=sys.stderr)
        return EXIT_DATA_MISSING
    out_dir = Path(args.out or "run") / "visualize"
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    n = min(args.limit, len(split)) if args.limit else len(split)
    for i in range(n):
        image = split.images[i]
        out = model.forward(image[None])
        maps = out.score_maps.data[0].reshape(cfg.M, cfg.n_rows, cfg.n_cols)
        impl = out.impl_positions.data[0]
        pred = out.pred_positions.data[0]
        weights = out.pred_weights.data[0]
        stem = out_dir / f"img{i:03d}"
        for k in range(cfg.M):
            pos.write_score_map_pgm(f"{stem}_part{k + 1}.pgm", maps[k])
        pos.write_positions_csv(
            f"{stem}_positions.csv",
            [(k + 1, impl[k, 0], impl[k, 1], pred[k, 0], pred[k, 1], weights[k])
             for k in range(cfg.M)],
        )
        marked = image.copy()
        for k in range(cfg.M):
            _mark(marked, pred[k, 0] * cfg.H - 0.5, pred[k, 1] * cfg.W - 0.5,
                  (1.0, 0.0, 0.0))
        write_ppm(f"{stem}_marked.ppm", marked)
        figures.save_part_overview(f"{stem}_overview.png", image, maps,
                                   impl, pred, weights)
    print(f"wrote visualizations for {n} images to {out_dir}")
    return EXIT_OK


def _ablation_rows(axis, cfg):
    if axis == "losses":
        return [
            ("id+euclidean-triplet", {"dips": 0, "lambda_pe": 0.0, "transform": False}),
            ("+part-triplet", {"lambda_pe": 0.0, "transform": False}),
            ("+position-loss", {"transform": False}),
            ("+transformed-branch", {}),
        ]
    if axis == "dip-count":
        return [(f"M={m}", {"dips": m, "lambda_pe": 0.0 if m == 0 else cfg.lambda_pe,
                            "transform": False if m == 0 else cfg.transform})
                for m in (0, 4, 8, 12, 16)]
    if axis == "weighting":
        return [("weighting-on", {"weighting": True}),
                ("weighting-off", {"weighting": False})]
    if axis == "transform":
        return [("transform-on", {"transform": True}),
                ("transform-off", {"transform": False})]
    raise ValueError(axis)


def cmd_ablate(args):
    import csv as csv_mod
    import tempfile

    import numpy as np

    from . import data as dat
    from . import figures
    from .config import ConfigError
    from .evaluate import evaluate_retrieval
    from .train import train

    if args.axis not in ABLATION_AXES:
        print(f"unknown ablation axis {args.axis!r}; expected one of "
              f"{', '.join(ABLATION_AXES)}", file=sys.stderr)
        return EXIT_UNKNOWN_AXIS
    try:
        cfg = _run_config(args)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    data_root = Path(args.data or "data")
    if not (data_root / "train" / "labels.csv").exists():
        _generate_splits(cfg, data_root)
    train_ds = dat.load_dataset(data_root / "train")
    query = _load_split(data_root, "query")
    gallery = _load_split(data_root, "gallery")
    if query is None or gallery is None:
        print(f"query/gallery splits missing under {data_root}", file=sys.stderr)
        return EXIT_DATA_MISSING

    out_dir = Path(args.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, tweaks in _ablation_rows(args.axis, cfg):
        r1s, maps = [], []
        for seed in seeds:
            row_cfg = _run_config(args)
            for key, value in tweaks.items():
                setattr(row_cfg, key, value)
            row_cfg.seed = seed
            try:
                tc = row_cfg.train_config()
                pc = row_cfg.patch_config()
            except ConfigError as e:
                print(f"config error: {e}", file=sys.stderr)
                return EXIT_CONFIG
            with tempfile.TemporaryDirectory() as tmp:
                model, _ = train(train_ds, tc, pc, tmp)
            result = evaluate_retrieval(
                model, query.images, query.labels, query.cameras,
                gallery.images, gallery.labels, gallery.cameras,
                camera_filter=row_cfg.camera_filter,
            )
            r1s.append(result.rank1)
            maps.append(result.map)
        rows.append({
            "config": name,
            "rank1": float(np.mean(r1s)),
            "map": float(np.mean(maps)),
            "rank1_per_seed": r1s,
            "map_per_seed": maps,
        })
        print(f"{name:24s} rank1={rows[-1]['rank1']:.4f} mAP={rows[-1]['map']:.4f}")

    csv_path = out_dir / f"ablation_{args.axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["config", "rank1", "map"])
        for row in rows:
            writer.writerow([row["config"], f"{row['rank1']:.6f}", f"{row['map']:.6f}"])
    figures.save_ablation_chart(out_dir / f"ablation_{args.axis}.png", rows, args.axis)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_gen_data(args):
    from .config import ConfigError

    try:
        cfg = _run_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    root = _generate_splits(cfg, Path(args.data or "data"))
    print(f"wrote dataset splits under {root}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
