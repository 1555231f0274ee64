"""Command-line entry point: ``mmsr <command> [flags]``.

Exit codes: 0 ok, 2 bad arguments, 3 malformed input file, 4 training
diverged, 5 gradient check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import images
from .errors import ArgumentError, ConfigError, FormatError, NumericError, TrainingError
from .images import Image
from .network import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (
    Pair,
    TrainConfig,
    predict_image,
    rmse,
    run_ablation,
    train_pair,
    write_ablation_csv,
)

log = logging.getLogger("mmsr")

EXIT_OK, EXIT_ARGS, EXIT_FORMAT, EXIT_TRAIN, EXIT_GRADCHECK = 0, 2, 3, 4, 5


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_existing(path) -> Image:
    if not Path(path).is_file():
        raise ArgumentError(f"no such file: {path}")
    return images.load(path)


def _format_of(path, img: Image) -> str:
    """Output format family matching an input file."""
    with open(path, "rb") as fh:
        if fh.read(4) == images.F32R_MAGIC:
            return "f32r"
    return "pgm" if img.channels == 1 else "ppm"


# --------------------------------------------------------------------------
# commands


def cmd_sr(args) -> int:
    started = _now()
    src = _load_existing(args.source)
    guide = _load_existing(args.guide)
    mcfg = ModelConfig(variant=args.variant, n=args.n, m=args.m, channels=args.channels, scale=args.scale)
    tcfg = TrainConfig(epochs=args.epochs, lr0=args.lr0, decay=args.decay, decay_every=args.decay_every,
                       seed=args.seed, dtype=args.dtype, log_every=args.log_every)
    params, sr, report = train_pair(src, guide, mcfg, tcfg)

    out = Path(args.out)
    fmt = _format_of(args.source, src)
    images.save(out, sr, fmt)
    ckpt = Path(args.ckpt_out) if args.ckpt_out else out.with_suffix(".ckpt")
    save_checkpoint(ckpt, params, mcfg, extra={"train": tcfg.to_dict()})
    log_path = out.with_name(out.name + ".log")
    log_path.write_text("\n".join(report.log_lines()) + "\n")

    rmse_value = None
    if args.gt:
        rmse_value = rmse(sr, _load_existing(args.gt))
    manifest = {
        "tool": "mmsr",
        "version": __version__,
        "command": "sr",
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "paths": {"source": str(args.source), "guide": str(args.guide), "out": str(out),
                  "checkpoint": str(ckpt), "log": str(log_path), "gt": args.gt},
        "output_format": fmt,
        "seed": args.seed,
        "summary": report.summary(rmse_value),
        "started": started,
        "finished": _now(),
    }
    man_path = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    summary = report.summary(rmse_value)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    ckpt = args.ckpt or manifest["paths"]["checkpoint"]
    params, mcfg, _ = load_checkpoint(ckpt)
    src = _load_existing(manifest["paths"]["source"])
    guide = _load_existing(manifest["paths"]["guide"])
    sr = predict_image(params, src, guide, mcfg)
    images.save(args.out, sr, manifest.get("output_format"))
    return EXIT_OK


def cmd_downsample(args) -> int:
    img = _load_existing(args.inp)
    images.save(args.out, images.degrade_pool(img, args.scale), _format_of(args.inp, img))
    return EXIT_OK


def cmd_noise(args) -> int:
    img = _load_existing(args.inp)
    images.save(args.out, images.add_gaussian_noise(img, args.sigma255, args.seed), _format_of(args.inp, img))
    return EXIT_OK


def cmd_eval(args) -> int:
    print(f"{rmse(_load_existing(args.a), _load_existing(args.b)):.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    root = Path(args.out_dir)
    for i in range(args.count):
        gt, guide, lr = images.synth_pair(args.seed + i, args.size, args.scale, texture=args.texture)
        d = root if args.count == 1 else root / f"pair{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        images.save(d / "gt.f32r", gt)
        images.save(d / "guide.f32r", guide)
        images.save(d / "lr.f32r", lr)
    return EXIT_OK


def _find(d: Path, stem: str) -> Path | None:
    hits = sorted(p for p in d.iterdir() if p.is_file() and p.stem == stem)
    return hits[0] if hits else None


def load_pairs_dir(root) -> list[Pair]:
    """Pairs are directories holding lr.*, guide.* and gt.*; ``root`` itself may be one."""
    root = Path(root)
    if not root.is_dir():
        raise ArgumentError(f"not a directory: {root}")
    dirs = [root] if _find(root, "lr") else sorted(p for p in root.iterdir() if p.is_dir())
    pairs = []
    for d in dirs:
        found = {k: _find(d, k) for k in ("lr", "guide", "gt")}
        if not all(found.values()):
            continue
        pairs.append(Pair(images.load(found["lr"]), images.load(found["guide"]), images.load(found["gt"]), d.name))
    if not pairs:
        raise ArgumentError(f"no (lr, guide, gt) triples under {root}")
    return pairs


def cmd_ablate(args) -> int:
    pairs = load_pairs_dir(args.pairs_dir)
    scale = pairs[0].guide.height // pairs[0].lr.height
    base = ModelConfig(variant="model3", n=args.n, m=args.m, channels=args.channels, scale=scale)
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed, dtype=args.dtype)
    variants = [v for v in args.variants.split(",") if v.strip()]
    rows = run_ablation(pairs, variants, base, tcfg, m_sweep=args.m_sweep or (), workers=args.workers)
    write_ablation_csv(args.out_csv, rows)
    for r in rows:
        print(f"{r['variant']},{r['n']},{r['m']},{r['scale']},{r['mean_rmse']:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import format_rows, run_bench

    rows = run_bench(sizes=args.sizes, channels=args.channels, hw=args.hw, naive_rows=args.naive_rows,
                     repeat=args.repeat)
    print("\n".join(format_rows(rows)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results, secs = run_suite(seed=args.seed, n_configs=args.configs)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.op:<18} cases={r.cases} max_rel_err={r.max_rel_error:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} ops passed in {secs:.1f}s")
    if failed:
        for r in failed:
            print(f"gradcheck failed: {r.op} relative error {r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmsr", description="Self-supervised cross-modal super-resolution.")
    p.add_argument("--version", action="version", version=f"mmsr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", help="train on one (LR source, HR guide) pair and write the SR source")
    s.add_argument("--source", required=True)
    s.add_argument("--guide", required=True)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--n", type=int, default=11, help="source-to-guide neighborhood (depth: 11, DEM/thermal: 5)")
    s.add_argument("--m", type=int, default=5, help="guide-to-source neighborhood (depth: 5, DEM/thermal: 3)")
    s.add_argument("--variant", default="model3")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--lr0", type=float, default=0.002)
    s.add_argument("--decay", type=float, default=0.9998)
    s.add_argument("--decay-every", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    s.add_argument("--log-every", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--ckpt-out")
    s.add_argument("--manifest")
    s.add_argument("--gt", help="optional ground truth; adds RMSE to the summary")
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("replay", help="re-emit the SR image from a manifest and checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("downsample", help="average-pool an image by an integer factor")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--scale", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_downsample)

    s = sub.add_parser("noise", help="add Gaussian noise given on the 0-255 scale")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--sigma255", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_noise)

    s = sub.add_parser("eval", help="print RMSE between two images in native units")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write synthetic (gt, guide, lr) triples")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--texture", type=float, default=0.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ablate", help="train model variants over a pairs directory and write mean RMSE")
    s.add_argument("--pairs-dir", required=True)
    s.add_argument("--variants", default="model0,model1,model2,model3")
    s.add_argument("--n", type=int, default=11)
    s.add_argument("--m", type=int, default=5)
    s.add_argument("--m-sweep", type=_int_list, default=None)
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-csv", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", help="modulation throughput: per-pixel oracle vs fused kernel")
    s.add_argument("--sizes", type=_int_list, default=[1, 3, 5, 7, 11])
    s.add_argument("--channels", type=_int_list, default=[64])
    s.add_argument("--hw", type=int, default=128)
    s.add_argument("--naive-rows", type=int, default=4)
    s.add_argument("--repeat", type=int, default=3)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--configs", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ArgumentError, ConfigError) as exc:
        print(f"mmsr: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except FormatError as exc:
        print(f"mmsr: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingError, NumericError) as exc:
        print(f"mmsr: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"mmsr: error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
