"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from pathlib import Path

from . import __version__

IMAGE_SUFFIXES = (".ppm", ".png")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _iou_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad IoU list {text!r}") from None
    if not vals or not all(0.0 < v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return vals


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {path} not found")
    return p


def cmd_synth_blur(a) -> int:
    from .blur import TrajectoryParams, make_blur_pair, psnr
    from .data import read_image, write_image
    from .rng import derive_seed

    src = _existing(a.in_dir, "input directory")
    files = _image_files(src)
    if not files:
        raise UsageError(f"no .ppm/.png images in {src}")
    params = TrajectoryParams(length_steps=a.steps)
    params.validate()
    out = Path(a.out)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    (out / "blurred").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "seed", "psnr"])
        for i, f in enumerate(files):
            seed = derive_seed(a.seed, "synth-blur", i)
            pair = make_blur_pair(read_image(f), seed, params, a.psf_size)
            write_image(out / "sharp" / f.name, pair.sharp)
            write_image(out / "blurred" / f.name, pair.blurred)
            w.writerow([f.name, seed, f"{psnr(pair.sharp, pair.blurred):.4f}"])
    print(f"wrote {len(files)} pairs to {out}")
    return 0


def cmd_train(a) -> int:
    from .config import load_config
    from .train import train

    cfg = load_config(_existing(a.config, "config file"))
    if a.out:
        cfg.out_dir = a.out
    train_path, infer_path = train(cfg)
    print(f"training checkpoint: {train_path}\ninference checkpoint: {infer_path}")
    return 0


def cmd_eval(a) -> int:
    from .evaluate import evaluate

    _existing(a.ckpt, "checkpoint")
    _existing(a.data, "annotation index")
    report = evaluate(a.ckpt, a.data, a.images, a.iou, a.out, a.allow_train)
    for k, v in report.items():
        print(f"{k:12s} {'nan' if math.isnan(v) else f'{v:.4f}'}")
    return 0


def cmd_detect(a) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_image
    from .evaluate import predict

    ck = load_checkpoint(_existing(a.ckpt, "checkpoint"))
    img = read_image(_existing(a.image, "image"))
    dets = predict(ck.model, [img], k_max=ck.config.k_max, score_thresh=a.thresh)
    print(f"{len(dets)} detections")
    for d in dets:
        print(f"{d.class_id} {d.score:.4f} " + " ".join(f"{v:.2f}" for v in d.box))
    return 0


def cmd_gradcheck(a) -> int:
    from .checks import TOLERANCE, run_suite

    t0 = time.time()
    worst = run_suite(a.module, a.seeds)
    for name, err in sorted(worst.items()):
        print(f"{name:20s} {err:.3e}")
    top = max(worst.values())
    ok = top < TOLERANCE
    print(f"max relative error {top:.3e} over {a.seeds} seeds ({time.time() - t0:.1f}s): "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def cmd_stats(a) -> int:
    from .blur import blur_stats, find_modes, write_stats_csv
    from .data import read_image

    root = _existing(a.pairs, "pairs directory")
    sharp_dir, blur_dir = root / "sharp", root / "blurred"
    if not sharp_dir.is_dir() or not blur_dir.is_dir():
        raise UsageError(f"{root} must contain sharp/ and blurred/ subdirectories")
    pairs = []
    for f in _image_files(sharp_dir):
        other = blur_dir / f.name
        if not other.exists():
            raise FileNotFoundError(f"no blurred counterpart for {f.name}")
        pairs.append((read_image(f), read_image(other)))
    rows = blur_stats(pairs)
    out = Path(a.out) if a.out else root / "stats.csv"
    write_stats_csv(rows, out)
    print("psnr_bin count mean_ssim")
    for r in rows:
        print(f"{'inf' if math.isinf(r.psnr_bin) else int(r.psnr_bin):>8} {r.count:5d} {r.mean_ssim:.4f}")
    print("modes: " + ", ".join(f"{m:g} dB" for m in find_modes(rows)))
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="drebnet", description="Blur-robust small-object detector: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"drebnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-blur", help="blur every image in a directory with a sampled camera trajectory")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=64, help="trajectory length")
    s.add_argument("--psf-size", type=int, default=17)
    s.set_defaults(fn=cmd_synth_blur)

    s = sub.add_parser("train", help="two-phase training from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override out_dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on an annotated set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="annotation index")
    s.add_argument("--images", help="image directory (default: next to the index)")
    s.add_argument("--iou", type=_iou_list, default=(0.5,))
    s.add_argument("--out", default="eval_out")
    s.add_argument("--allow-train", action="store_true")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("detect", help="detect objects in one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--thresh", type=float, default=0.3)
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", choices=("all", "primitives", "magff", "lfamm", "losses"), default="all")
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("stats", help="PSNR histogram with mean SSIM per bin for sharp/blurred pairs")
    s.add_argument("--pairs", required=True, help="directory with sharp/ and blurred/")
    s.add_argument("--out", help="CSV path (default: PAIRS/stats.csv)")
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        return a.fn(a)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except Exception as e:  # reported, not traced
        print(f"drebnet: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
