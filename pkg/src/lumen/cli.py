"""Command-line entry point: ``lumen <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import imaging
from .bench import bench_attention
from .checks import TOL, run_all
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .data import DatasetError, load_dataset
from .diffcore import RngStream
from .fixture import make_fixture
from .flash import ClusterCenters, FlashParams, simulate_flash
from .losses import FrozenRandomExtractor
from .training import evaluate, load_model, train, write_report


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file or directory: {path}")
    return p


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from exc
    if not sizes or any(s <= 0 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


def _load_input(path: Path) -> torch.Tensor:
    return imaging.center_crop_multiple(imaging.load_image(path)).unsqueeze(0)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    index = load_dataset(args.data_root, "train", require_depth=cfg.lambda_depth > 0)
    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
    log_path = Path(args.log) if args.log else Path(f"{args.out}.losses.jsonl")
    result = train(cfg, index, resume=resume, out=Path(args.out), log_path=log_path)
    last = result.losses[-1] if result.losses else {}
    print(json.dumps({"checkpoint": str(args.out), "step": result.checkpoint.step, "last": last}))
    return 0


@torch.no_grad()
def cmd_enhance(args) -> int:
    model, _ = load_model(args.ckpt)
    model.eval()
    art = model(_load_input(args.input))
    imaging.save_image(art.i_enh[0], args.output)
    if args.emit_depth:
        imaging.save_depth(art.d_pred[0], args.emit_depth)
    if args.emit_flash:
        imaging.save_image(art.i_flash[0], args.emit_flash)
    return 0


@torch.no_grad()
def cmd_depth(args) -> int:
    model, _ = load_model(args.ckpt)
    model.eval()
    d_pred, _ = model.depth(_load_input(args.input))
    imaging.save_depth(d_pred[0], args.output)
    return 0


@torch.no_grad()
def cmd_flashsim(args) -> int:
    image = imaging.load_image(args.input).unsqueeze(0)
    depth = imaging.load_depth(args.depth).unsqueeze(0)
    if depth.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"depth size {tuple(depth.shape[-2:])} differs from image {tuple(image.shape[-2:])}")
    centers = ClusterCenters(args.clusters)
    mode = "train" if args.train_noise else "eval"
    flash, _, _ = simulate_flash(image, depth, centers, FlashParams(), mode, RngStream(args.seed))
    imaging.save_image(flash[0], args.output)
    return 0


def cmd_eval(args) -> int:
    model, ckpt = load_model(args.ckpt)
    index = load_dataset(args.data_root, "test")
    report = evaluate(model, index, args.out_dir, extractor=FrozenRandomExtractor(args.extractor_seed),
                      step=ckpt.step, timing=args.timing)
    write_report(report, args.report)
    print(json.dumps(report["mean"]))
    return 0


def cmd_metrics(args) -> int:
    a, b = imaging.load_image(args.a), imaging.load_image(args.b)
    out = {
        "psnr": imaging.format_psnr(imaging.psnr(a, b)),
        "ssim": imaging.ssim(a.double(), b.double()).item(),
        "mae": imaging.mae(a, b),
    }
    print(json.dumps(out))
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for name, seed, r in run_all(args.tol):
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {name} seed={seed} {r.name} max_rel_err={r.max_rel_error:.3e} "
              f"kink_crossings={r.kink_crossings}/{r.probes} {r.note}".rstrip())
    return 0 if ok else 1


def cmd_bench(args) -> int:
    report = bench_attention(args.sizes)
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for row in report["rows"]:
        print(f"{row['size']:4d}^2  efb tokens={sorted(set(row['efb']['query_tokens']))}  "
              f"full tokens={sorted(set(row['full']['query_tokens']))}")
    return 0 if report["pooled_constant"] and report["full_matches_hw"] else 1


def cmd_fixture(args) -> int:
    make_fixture(args.root, args.n_train, args.n_test, args.size, args.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lumen", description="Depth-guided low-light enhancement")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, type=_existing)
    p.add_argument("--data-root", required=True, type=_existing)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", type=_existing)
    p.add_argument("--log", help="loss log path (JSON lines); default <out>.losses.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one image")
    p.add_argument("--ckpt", required=True, type=_existing)
    p.add_argument("--input", required=True, type=_existing)
    p.add_argument("--output", required=True)
    p.add_argument("--emit-depth")
    p.add_argument("--emit-flash")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("depth", help="predict a 16-bit depth map")
    p.add_argument("--ckpt", required=True, type=_existing)
    p.add_argument("--input", required=True, type=_existing)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("flashsim", help="simulate the virtual flash from an image and depth map")
    p.add_argument("--input", required=True, type=_existing)
    p.add_argument("--depth", required=True, type=_existing)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--train-noise", action="store_true")
    p.add_argument("--clusters", type=int, default=8)
    p.set_defaults(func=cmd_flashsim)

    p = sub.add_parser("eval", help="evaluate a checkpoint on <data-root>/test")
    p.add_argument("--ckpt", required=True, type=_existing)
    p.add_argument("--data-root", required=True, type=_existing)
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--timing", action="store_true", help="add wall-clock runtime to the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="PSNR / SSIM / MAE between two images")
    p.add_argument("--a", required=True, type=_existing)
    p.add_argument("--b", required=True, type=_existing)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-attention", help="pooled vs full attention token counts")
    p.add_argument("--sizes", type=_sizes, default=[16, 32, 64, 128])
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-fixture", help="write the synthetic paired fixture")
    p.add_argument("--root", required=True)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=2024)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, ConfigError, DatasetError, CheckpointError) as exc:
        print(f"lumen {args.command}: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
