"""Command-line entry point: ``vtryon <subcommand> [options]``.

Exit status is 0 on success, 2 on usage or configuration errors and 1 on
runtime failures. Errors are reported as a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import Config, ConfigError, load_config

SUMMARY_SCHEMA = 1
log = logging.getLogger("vtryon")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtryon", description="Two-stage video virtual try-on.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("make-toy-data", help="render the synthetic toy dataset")
    _common(p)
    p.add_argument("--clips", type=int, default=5)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = sub.add_parser("train-tryon", help="stage I: warping and region replacement")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume")

    p = sub.add_parser("train-refine", help="stage II: memory refinement with stage I frozen")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-I checkpoint")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("infer", help="dress one clip in a model image's clothes")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--model-image", required=True)
    p.add_argument("--model-pose", help="pose JSON of the model image (default: model_pose.json next to it)")
    p.add_argument("--no-refine", action="store_true", help="emit stage-I frames only")

    p = sub.add_parser("fid", help="FID between two directories of PNG images")
    _common(p, out_required=False)
    p.add_argument("--dir-a", required=True)
    p.add_argument("--dir-b", required=True)
    p.add_argument("--embedder", default="random", choices=["random", "inception"])

    for name, text in (("cts", "cycle transfer score of a checkpoint"),
                       ("evaluate", "FID + CTS report for stage I and the full pipeline")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--embedder", default="random", choices=["random", "inception"])
    return parser


def _config(args) -> Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _clips(data, split, cfg):
    from .core import load_split
    from .pipeline import prepare_clip

    return [prepare_clip(c, cfg.data) for c in load_split(data, split)]


def cmd_make_toy_data(args, cfg: Config):
    from .core import make_toy_dataset

    make_toy_dataset(args.out, n_clips=args.clips, frames_per_clip=args.frames, height=cfg.data.height,
                     width=cfg.data.width, seed=cfg.train.seed, test_fraction=args.test_fraction,
                     label_sets={"clothes_arms": list(cfg.data.clothes_arms),
                                 "face_neck_hair": list(cfg.data.face_neck_hair)})
    print(str(Path(args.out) / "manifest.json"))


def _metrics_summary(metrics, stage, ckpt, cfg):
    rows = metrics.rows
    numeric = lambda r: {k: v for k, v in r.items() if isinstance(v, float)}
    return {"schema": SUMMARY_SCHEMA, "stage": stage, "checkpoint": Path(ckpt).name,
            "iterations": len(rows), "seed": cfg.train.seed, "first": numeric(rows[0]) if rows else {},
            "final": numeric(rows[-1]) if rows else {}, "device": "cpu"}


def cmd_train_tryon(args, cfg: Config):
    from .discriminators import DiscriminatorNets
    from .train import train_stage1
    from .tryon import TryOnNetworks

    clips = _clips(args.data, "train", cfg)
    torch.manual_seed(cfg.train.seed)
    tryon, disc = TryOnNetworks(cfg.arch), DiscriminatorNets(cfg.arch)
    ckpt, metrics = train_stage1(tryon, disc, clips, cfg, args.out, resume=args.resume,
                                 iterations=args.iterations)
    out = Path(args.out)
    (out / "config.txt").write_text(cfg.to_text())
    _write_json(out / "stage1_summary.json", _metrics_summary(metrics, 1, ckpt, cfg))
    print(str(ckpt))


def cmd_train_refine(args, cfg: Config):
    from .discriminators import DiscriminatorNets
    from .memory import RefineNetworks
    from .train import load_tryon, train_stage2

    clips = _clips(args.data, "train", cfg)
    tryon = load_tryon(args.ckpt, cfg)
    torch.manual_seed(cfg.train.seed)
    refine, disc = RefineNetworks(cfg.arch), DiscriminatorNets(cfg.arch)
    ckpt, metrics = train_stage2(refine, disc, tryon, clips, cfg, args.out, iterations=args.iterations)
    out = Path(args.out)
    (out / "config.txt").write_text(cfg.to_text())
    _write_json(out / "stage2_summary.json", _metrics_summary(metrics, 2, ckpt, cfg))
    print(str(ckpt))


def cmd_infer(args, cfg: Config):
    from .core import load_clip, read_image, read_pose, write_image
    from .evaluation import load_networks
    from .pipeline import Pipeline, make_subject, tensor_image

    tryon, refine, _ = load_networks(args.ckpt, cfg)
    clip = load_clip(args.data, args.clip)
    model_path = Path(args.model_image)
    pose_path = Path(args.model_pose) if args.model_pose else model_path.with_name("model_pose.json")
    if not pose_path.exists():
        raise FileNotFoundError(f"model pose not found: {pose_path}")
    pixels = read_image(model_path)
    if pixels.shape[:2] != (cfg.data.height, cfg.data.width):
        raise ValueError(f"model image is {pixels.shape[1]}x{pixels.shape[0]}, "
                         f"expected {cfg.data.width}x{cfg.data.height}")
    model = make_subject(pixels, read_pose(pose_path), None, cfg.data)
    targets = [make_subject(f.pixels, p, None, cfg.data) for f, p in zip(clip.frames, clip.poses)]
    pipe = Pipeline(tryon, refine, cfg.data, cfg.train.memory_cap)
    use_refine = refine is not None and not args.no_refine
    frames = pipe.run(model, targets, refine=use_refine)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_image(out / f"{i:05d}.png", tensor_image(f))
    _write_json(out / "summary.json", {"schema": SUMMARY_SCHEMA, "clip": args.clip, "n_frames": len(frames),
                                       "refined": use_refine, "model_image": model_path.name,
                                       "checkpoint": Path(args.ckpt).name, "device": "cpu"})
    print(str(out / "summary.json"))


def cmd_fid(args, cfg: Config):
    from .evaluation import build_embedder, directory_images, feature_stats, fid

    embedder = build_embedder(args.embedder, cfg.train.seed)
    score = fid(feature_stats(embedder, directory_images(args.dir_a)),
                feature_stats(embedder, directory_images(args.dir_b)))
    if args.out:
        _write_json(Path(args.out) / "fid.json", {"schema": SUMMARY_SCHEMA, "fid": score,
                                                  "embedder": getattr(embedder, "name", args.embedder)})
    print(score)


def cmd_evaluate(args, cfg: Config):
    from .evaluation import build_embedder, evaluate_checkpoint, format_table

    report = evaluate_checkpoint(args.ckpt, args.data, build_embedder(args.embedder, cfg.train.seed), cfg,
                                 split=args.split, out_dir=args.out)
    print(format_table(report))


def cmd_cts(args, cfg: Config):
    from .evaluation import build_embedder, evaluate_checkpoint

    report = evaluate_checkpoint(args.ckpt, args.data, build_embedder(args.embedder, cfg.train.seed), cfg,
                                 split=args.split)
    rows = [{k: r[k] for k in ("method", "embedder", "cts", "cts_l1", "n_pairs", "skipped", "reverse_source")}
            for r in report["methods"]]
    _write_json(Path(args.out) / "cts.json", {"schema": SUMMARY_SCHEMA, "methods": rows})
    for r in rows:
        print(f"{r['method']} {r['cts']:.6f}")


COMMANDS = {"make-toy-data": cmd_make_toy_data, "train-tryon": cmd_train_tryon, "train-refine": cmd_train_refine,
            "infer": cmd_infer, "fid": cmd_fid, "cts": cmd_cts, "evaluate": cmd_evaluate}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"status": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage text
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", exc, 2)
    torch.manual_seed(cfg.train.seed)
    np.random.seed(cfg.train.seed)
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("usage", exc, 2)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail("runtime", exc, 1)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
