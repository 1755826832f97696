"""Command-line entry points: gen-data, train, eval, fuse, hull.

Exit codes: 0 success, 1 runtime failure, 2 usage error. A JSON --config file
supplies defaults; explicit flags win over it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _parse_presets(text):
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    return names


def build_parser():
    parser = argparse.ArgumentParser(
        prog="wbfusion",
        description="Multi-illuminant white balance by transformer fusion of WB presets.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    subparsers = {}

    def add_common(sp):
        sp.add_argument("--config", help="JSON file with flag defaults", default=None)
        sp.add_argument("--threads", type=int, default=1, help="worker threads")

    p = sub.add_parser("gen-data", help="generate a synthetic multi-illuminant dataset")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--size", type=int, default=64, help="square image size in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--ratios", default="0.65,0.15,0.20", help="train,val,test split ratios"
    )
    add_common(p)
    subparsers["gen-data"] = p

    p = sub.add_parser("train", help="train the fusion model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default="model.wbf", help="checkpoint output path")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-interval", type=int, default=100)
    p.add_argument("--lr-start", type=float, default=1e-3)
    p.add_argument("--lr-end", type=float, default=1e-5)
    p.add_argument(
        "--presets",
        default=",".join(("tungsten", "fluorescent", "daylight", "cloudy", "shade")),
        help="comma list of preset inputs (model preset count follows)",
    )
    p.add_argument("--channels", type=int, default=15, help="feature channels C")
    p.add_argument("--heads", type=int, default=3, help="attention heads")
    p.add_argument("--expansion", type=float, default=2.0, help="feed-forward expansion")
    p.add_argument("--quiet", action="store_true")
    add_common(p)
    subparsers["train"] = p

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument(
        "--preset",
        default=None,
        help="evaluate a fixed image instead of a model: preset name, 'awb', or 'gt'",
    )
    p.add_argument(
        "--presets",
        default=None,
        help="preset inputs for a P<5 checkpoint (default: daylight / DST / all)",
    )
    p.add_argument("--out", default=None, help="report output directory")
    add_common(p)
    subparsers["eval"] = p

    p = sub.add_parser("fuse", help="fuse preset renders of one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument(
        "images",
        nargs="+",
        help="preset images in order tungsten fluorescent daylight cloudy shade "
        "(P images for a P-preset checkpoint)",
    )
    add_common(p)
    subparsers["fuse"] = p

    p = sub.add_parser("hull", help="convex-hull analysis of a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out", default=None, help="report output directory")
    p.add_argument("--maps", action="store_true", help="write per-scene distance maps")
    add_common(p)
    subparsers["hull"] = p

    return parser, subparsers


def _apply_config_file(args, subparser):
    if not args.config:
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ValueError(f"config file: unknown option {key!r}")
        if getattr(args, dest) == subparser.get_default(dest):
            setattr(args, dest, value)
    return args


def cmd_gen_data(args, parser):
    from .synth import build_dataset

    if args.n < 1:
        parser.error(f"--n must be >= 1, got {args.n}")
    if args.size < 8:
        parser.error(f"--size must be >= 8, got {args.size}")
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError:
        parser.error(f"--ratios must be three comma-separated numbers, got {args.ratios!r}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        parser.error(f"--ratios must be three numbers summing to 1, got {args.ratios!r}")
    manifest = build_dataset(
        args.n, args.size, args.size, args.seed, args.out, ratios, threads=args.threads
    )
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {args.n} scenes to {args.out} (splits: {counts})")
    return 0


def _default_subset(preset_count, parser):
    from .train import DEFAULT_PRESET_SUBSETS

    subset = DEFAULT_PRESET_SUBSETS.get(preset_count)
    if subset is None:
        parser.error(
            f"checkpoint uses {preset_count} presets; pass --presets to name them"
        )
    return subset


def cmd_train(args, parser):
    from .model import ModelConfig
    from .train import TrainConfig, train

    presets = _parse_presets(args.presets)
    model_cfg = ModelConfig(
        preset_count=len(presets),
        feature_channels=args.channels,
        attention_heads=args.heads,
        ffn_expansion=args.expansion,
    )
    config = TrainConfig(
        data_dir=args.data,
        checkpoint_path=args.out,
        total_steps=args.steps,
        batch_size=args.batch,
        seed=args.seed,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        val_interval=args.val_interval,
        presets=presets,
        model=model_cfg,
    )
    log = None if args.quiet else lambda msg: print(msg, flush=True)
    _, manifest = train(config, log=log)
    print(
        f"checkpoint {args.out}: step {manifest.selected_step}, "
        f"val dE2000 {manifest.selected_de2000:.4f}"
    )
    return 0


def cmd_eval(args, parser):
    from .model import load_checkpoint
    from .train import evaluate_split, write_report

    if (args.checkpoint is None) == (args.preset is None):
        parser.error("eval needs exactly one of --checkpoint or --preset")
    if args.checkpoint:
        params, config = load_checkpoint(args.checkpoint)
        presets = (
            _parse_presets(args.presets)
            if args.presets
            else _default_subset(config.preset_count, parser)
        )
        report = evaluate_split(
            args.data, args.split, params=params, config=config, presets=presets,
            threads=args.threads,
        )
    else:
        report = evaluate_split(
            args.data, args.split, baseline=args.preset, threads=args.threads
        )
    print(report.to_table(title=f"split {args.split}"))
    if args.out:
        table_path, json_path = write_report(report, args.out, args.split)
        print(f"wrote {table_path} and {json_path}")
    return 0


def cmd_fuse(args, parser):
    from .model import PresetStack, forward, load_checkpoint
    from .synth import load_png, save_png

    params, config = load_checkpoint(args.checkpoint)
    if len(args.images) != config.preset_count:
        parser.error(
            f"checkpoint expects {config.preset_count} preset images, got {len(args.images)}"
        )
    images = []
    shape = None
    for path in args.images:
        img = load_png(path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(
                f"{path}: dimensions {img.shape[1]}x{img.shape[0]} do not match "
                f"{shape[1]}x{shape[0]} of {args.images[0]}"
            )
        images.append(np.float32(img))
    x = np.concatenate(images, axis=2)
    out = forward(x, params, config)
    save_png(args.out, out)
    print(f"wrote {args.out} ({out.shape[1]}x{out.shape[0]})")
    return 0


def cmd_hull(args, parser):
    from .linear_fusion import analyze_hull
    from .synth import load_split, save_png

    scenes = load_split(args.data, args.split)
    if not scenes:
        raise ValueError(f"{args.data}: split {args.split!r} is empty")

    def analyze(item):
        sid, stack, gt, _ = item
        return sid, analyze_hull(stack, gt, tol=args.tol)

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(analyze, scenes))
    else:
        results = [analyze(s) for s in scenes]

    records = [rep.to_record(sid) for sid, rep in results]
    all_dist = np.concatenate([rep.distances.ravel() for _, rep in results])
    aggregate = {
        "record": "hull-aggregate",
        "split": args.split,
        "tol": args.tol,
        "scene_count": len(results),
        "out_of_hull_fraction": float((all_dist > args.tol).mean()),
        "mean_distance": float(all_dist.mean()),
        "max_distance": float(all_dist.max()),
        "pixel_count": int(all_dist.size),
    }
    print(
        f"split {args.split}: out-of-hull fraction {aggregate['out_of_hull_fraction']:.4f} "
        f"at tol {args.tol:g} (mean distance {aggregate['mean_distance']:.5f})"
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"hull_{args.split}.json")
        with open(path, "w") as fh:
            json.dump(records + [aggregate], fh, indent=2, sort_keys=True)
            fh.write("\n")
        if args.maps:
            for sid, rep in results:
                save_png(os.path.join(args.out, f"hull_{sid}.png"), rep.distance_map())
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "hull": cmd_hull,
}


def main(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    sub = subparsers[args.command]
    try:
        args = _apply_config_file(args, sub)
        return COMMANDS[args.command](args, sub)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"wbfusion {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
