"""Command-line interface: gen-data, train, infer, eval, bench, lr-range-test."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .arch import ARCHITECTURES, ArchConfig, build_network, desk_config
from .bench import bench_latency, infer_mask
from .data import Manifest, generate_synthetic, load_frames, read_png, write_png
from .metrics import evaluate
from .optim import TrainConfig, train_loop

logger = logging.getLogger("toolnet")

# CLR bounds found by validation-set sweeps, per architecture family
DEFAULT_BOUNDS = {"toolnet-ms": (1e-7, 1e-5), "toolnet-h": (1e-7, 1e-5), "baseline": (1e-10, 1e-8)}

ARCH_KEYS = ("scales", "base_width", "width_growth", "width_multiplier", "width_cap", "fc_width", "dropout")
TRAIN_DEFAULTS = {"seed": 0, "lr_scale": 1.0, "momentum": 0.99, "weight_decay": 0.0005,
                  "stepsize": None, "checkpoint_every": None, "split": "train"}


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")
    return h, w


def parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split ratios need three comma-separated values")
    return tuple(parts)


def _arch_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--scales", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--width-growth", type=int)
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--width-cap", type=int)
    p.add_argument("--fc-width", type=int)
    p.add_argument("--dropout", type=float)


def _train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--base-lr", type=float)
    p.add_argument("--max-lr", type=float)
    p.add_argument("--lr-scale", type=float, help="multiplies both CLR bounds")
    p.add_argument("--stepsize", type=int, help="iterations per half cycle (default: 2 x train frames)")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic tool-on-tissue dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=parse_size, default=(64, 64))
    p.add_argument("--split-ratios", type=parse_ratios, default=(1.0, 0.0, 0.0))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a network with the cyclical LR recipe")
    p.add_argument("--config", help="JSON file of option values; flags take precedence")
    _arch_options(p)
    _train_options(p)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("infer", help="write the predicted mask of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="per-frame metric table for a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write the report here as well as to stdout")

    p = sub.add_parser("bench", help="end-to-end inference latency")
    p.add_argument("--checkpoint", help="network to time; omit to time a fresh --arch build")
    p.add_argument("--config")
    _arch_options(p)
    p.add_argument("--size", type=parse_size, default=None)
    p.add_argument("--repeats", type=int, default=500)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("lr-range-test", help="short runs over candidate CLR bounds")
    p.add_argument("--config")
    _arch_options(p)
    _train_options(p)
    p.add_argument("--ranges", default="1e-8:1e-6,1e-7:1e-5,1e-6:1e-4,1e-5:1e-3",
                   help="comma-separated base:max pairs")
    return parser


def resolve(args: argparse.Namespace, keys: Sequence[str], defaults: dict) -> dict:
    """Flags override config-file values, which override defaults."""
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        file_values = json.loads(path.read_text())
    out = dict(defaults)
    for k in keys:
        if k in file_values:
            out[k] = file_values[k]
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _arch_config(opts: dict, size) -> ArchConfig:
    cfg = desk_config(opts["arch"]).to_dict()
    cfg.update({k: opts[k] for k in ARCH_KEYS if opts.get(k) is not None})
    if size is not None:
        cfg["input_size"] = list(size)
    return ArchConfig.from_dict(cfg)


def _train_opts(args) -> dict:
    keys = ("arch", "manifest", "split", "base_lr", "max_lr", "lr_scale", "stepsize", "momentum",
            "weight_decay", "seed", "out", "checkpoint_every") + ARCH_KEYS
    opts = resolve(args, keys, TRAIN_DEFAULTS)
    for need in ("arch", "manifest", "out"):
        if not opts.get(need):
            raise UsageError(f"--{need} is required (flag or config file)")
    base, top = DEFAULT_BOUNDS[opts["arch"]]
    opts.setdefault("base_lr", None)
    opts.setdefault("max_lr", None)
    opts["base_lr"] = opts["base_lr"] if opts["base_lr"] is not None else base
    opts["max_lr"] = opts["max_lr"] if opts["max_lr"] is not None else top
    return opts


def _write_config(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    manifest = generate_synthetic(args.n, args.seed, args.size, args.out, args.split_ratios)
    _write_config(Path(args.out), {"command": "gen-data", "n": args.n, "seed": args.seed,
                                   "size": list(args.size), "split_ratios": list(args.split_ratios)})
    print(f"wrote {len(manifest.entries)} samples and {Path(args.out) / 'manifest.txt'}")
    return 0


def _frames_and_config(opts):
    manifest = Manifest.read(opts["manifest"])
    frames, _ = load_frames(manifest, opts["split"])
    if not frames:
        raise ValueError(f"split {opts['split']!r} of {opts['manifest']} is empty")
    cfg = _arch_config(opts, frames[0].mask.shape)
    return manifest, frames, cfg


def _train_config(opts, base_lr, max_lr) -> TrainConfig:
    s = opts["lr_scale"]
    return TrainConfig(base_lr=base_lr * s, max_lr=max_lr * s, stepsize=opts["stepsize"],
                       momentum=opts["momentum"], weight_decay=opts["weight_decay"],
                       seed=opts["seed"], checkpoint_every=opts["checkpoint_every"])


def cmd_train(args) -> int:
    opts = _train_opts(args)
    manifest, frames, cfg = _frames_and_config(opts)
    out = Path(opts["out"])
    tcfg = _train_config(opts, opts["base_lr"], opts["max_lr"])
    _write_config(out, {"command": "train", **opts, "arch_config": cfg.to_dict(), "train_config": tcfg.to_dict()})
    net = build_network(opts["arch"], cfg, seed=opts["seed"])
    result = train_loop(net, frames, tcfg, out, manifest.means)
    print(f"{len(result.log)} iterations; final loss {result.log[-1][2]:.6f}; checkpoint {result.final_checkpoint}")
    return 1 if result.diverged else 0


def cmd_infer(args) -> int:
    net, means = checkpoint.load(args.checkpoint)
    image = read_png(args.image, "RGB")
    mask = infer_mask(net, image, means)
    write_png(args.out, mask)
    return 0


def cmd_eval(args) -> int:
    net, means = checkpoint.load(args.checkpoint)
    manifest = Manifest.read(args.manifest)
    manifest.means = means
    frames, skipped = load_frames(manifest, args.split, skip_errors=True)
    report = evaluate(net, frames, skipped)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return 0


def cmd_bench(args) -> int:
    dtype = np.float32 if args.dtype == "float32" else np.float64
    if args.checkpoint:
        net, means = checkpoint.load(args.checkpoint, dtype=dtype)
        size = args.size or net.cfg.input_size
        resolved = {"checkpoint": args.checkpoint}
    else:
        opts = resolve(args, ("arch",) + ARCH_KEYS, {})
        if not opts.get("arch"):
            raise UsageError("bench needs --checkpoint or --arch")
        net = build_network(opts["arch"], _arch_config(opts, args.size), seed=args.seed).astype(dtype)
        means = (0.0, 0.0, 0.0)
        size = net.cfg.input_size
        resolved = {"arch": opts["arch"], "arch_config": net.cfg.to_dict()}
    image = np.random.default_rng(args.seed).integers(0, 256, size=(*size, 3), dtype=np.uint8)
    report = bench_latency(net, image, means, args.repeats, args.warmup)
    text = report.to_text()
    print(f"mean {report.mean_ms:.3f} ms / {report.fps:.1f} fps over {report.repeats} runs")
    if args.out:
        out = Path(args.out)
        _write_config(out, {"command": "bench", **resolved, "size": list(size), "repeats": args.repeats,
                            "warmup": args.warmup, "dtype": args.dtype})
        (out / "bench.txt").write_text(text)
    return 0


def cmd_lr_range_test(args) -> int:
    opts = _train_opts(args)
    manifest, frames, cfg = _frames_and_config(opts)
    val, _ = load_frames(manifest, "validation")
    scored_on = "validation" if val else opts["split"]
    val = val or frames
    try:
        ranges = [tuple(float(v) for v in r.split(":")) for r in args.ranges.split(",")]
    except ValueError:
        raise UsageError(f"--ranges must be base:max pairs, got {args.ranges!r}")
    out = Path(opts["out"])
    _write_config(out, {"command": "lr-range-test", **opts, "ranges": ranges})
    stepsize = opts["stepsize"] or 2 * len(frames)
    lines = ["base_lr\tmax_lr\tmean_dsc"]
    best = None
    for base, top in ranges:
        net = build_network(opts["arch"], cfg, seed=opts["seed"])
        tcfg = _train_config(opts, base, top)
        tcfg.stepsize = stepsize
        # stepsize iterations: the rising half of the first cycle
        train_loop(net, frames, tcfg, out / f"range_{base:g}_{top:g}", manifest.means, iterations=stepsize)
        score = evaluate(net, val).mean("mean_dsc")
        lines.append(f"{base:g}\t{top:g}\t{score:.6f}")
        if best is None or score > best[2]:
            best = (base, top, score)
    lines.append(f"# best on {scored_on}: [{best[0]:g}, {best[1]:g}] mean DSC {best[2]:.6f}")
    text = "\n".join(lines) + "\n"
    (out / "lr_range.txt").write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "bench": cmd_bench, "lr-range-test": cmd_lr_range_test}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"toolnet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"toolnet: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
