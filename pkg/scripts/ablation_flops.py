"""FLOPs and parameter split for every BRAB/MAGFF/LFAMM toggle combination.

    python scripts/ablation_flops.py [--size 512] [--base-channels 32]
"""
from __future__ import annotations

import argparse
import itertools

from drebnet.model import ModelConfig, build_model, flop_breakdown, format_param_split


def rows(size: int, base_channels: int):
    for brab, magff, lfamm in itertools.product([False, True], repeat=3):
        cfg = ModelConfig(input_hw=(size, size), base_channels=base_channels,
                          enable_brab=brab, enable_magff=magff, enable_lfamm=lfamm)
        m = build_model(cfg)
        train, infer = flop_breakdown(m, "train"), flop_breakdown(m, "infer")
        yield brab, magff, lfamm, train.total, infer.total, infer.conv_family, format_param_split(m)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--base-channels", type=int, default=32)
    a = ap.parse_args()
    print(f"{'BRAB':5s} {'MAGFF':5s} {'LFAMM':5s} {'train GFLOPs':>12s} {'infer GFLOPs':>12s} "
          f"{'conv GFLOPs':>11s}  params MB (infer / train)")
    for brab, magff, lfamm, tr, inf, conv, split in rows(a.size, a.base_channels):
        mark = lambda b: "x" if b else "-"  # noqa: E731
        print(f"{mark(brab):5s} {mark(magff):5s} {mark(lfamm):5s} {tr / 1e9:12.3f} {inf / 1e9:12.3f} "
              f"{conv / 1e9:11.3f}  {split}")


if __name__ == "__main__":
    main()
