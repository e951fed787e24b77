"""Camera-shake motion blur: random trajectories, rasterized PSFs, and PSNR/SSIM population stats."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rngmod
from .losses import ssim


@dataclass(frozen=True)
class TrajectoryParams:
    length_steps: int = 64
    anxiety: float = 0.005
    max_jitter: float = 0.01  # std of the per-step velocity perturbation, px/step
    exposure_fraction: float = 1.0  # shutter-open share of the step; scales displacement
    initial_speed: float = 0.15  # px/step, random direction

    def validate(self) -> None:
        if self.length_steps < 2:
            raise ValueError("length_steps must be >= 2")
        if self.anxiety < 0 or self.max_jitter < 0 or self.initial_speed < 0:
            raise ValueError("anxiety, max_jitter and initial_speed must be >= 0")
        if not 0 < self.exposure_fraction <= 1:
            raise ValueError("exposure_fraction must be in (0, 1]")


@dataclass
class Trajectory:
    points: np.ndarray  # (length_steps, 2) as (x, y), centered
    params: TrajectoryParams
    seed: int


@dataclass
class Psf:
    kernel: np.ndarray

    @property
    def size(self) -> int:
        return self.kernel.shape[0]


@dataclass
class BlurPair:
    sharp: np.ndarray
    blurred: np.ndarray
    psf: Psf
    seed: int
    params: TrajectoryParams = field(default_factory=TrajectoryParams)


def sample_trajectory(params: TrajectoryParams = TrajectoryParams(), seed: int = 0) -> Trajectory:
    """Second-order random walk: Gaussian velocity kicks plus rare impulsive swerves."""
    params.validate()
    r = rngmod.stream(seed, "trajectory")
    angle = r.uniform(0, 2 * np.pi)
    v = params.initial_speed * np.array([np.cos(angle), np.sin(angle)])
    pos = np.zeros(2)
    points = np.empty((params.length_steps, 2))
    for t in range(params.length_steps):
        points[t] = pos
        kick = params.max_jitter * r.standard_normal(2)
        if r.random() < params.anxiety:
            # swerve: turn by roughly pi, keeping a speed of the same order
            turn = np.pi + r.uniform(-0.5, 0.5)
            c, s = np.cos(turn), np.sin(turn)
            v = 2.0 * np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])
        v = v + kick
        pos = pos + params.exposure_fraction * v
    points -= points.mean(axis=0)
    return Trajectory(points, params, seed)


def rasterize_psf(t: Trajectory, k_psf: int = 17) -> Psf:
    """Bilinear splat of trajectory points onto a k x k grid centered on the origin, unit sum."""
    if k_psf < 1 or k_psf % 2 == 0:
        raise ValueError("k_psf must be a positive odd integer")
    kernel = np.zeros((k_psf, k_psf))
    c = k_psf // 2
    for x, y in np.asarray(t.points, dtype=np.float64):
        px, py = x + c, y + c
        x0, y0 = math.floor(px), math.floor(py)
        fx, fy = px - x0, py - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < k_psf and 0 <= xx < k_psf:
                    kernel[yy, xx] += wy * wx
    total = kernel.sum()
    if total <= 0:
        raise ValueError("trajectory lies entirely outside the PSF grid")
    return Psf(kernel / total)


def apply_blur(sharp: np.ndarray, psf: Psf, clamp: bool = True) -> np.ndarray:
    """Convolve each channel of a CHW (or HW) image with the PSF, reflected borders."""
    img = np.asarray(sharp, dtype=np.float64)
    k = psf.kernel
    if k.shape[0] > img.shape[-2] or k.shape[1] > img.shape[-1]:
        raise ValueError(f"PSF {k.shape} larger than image {img.shape[-2:]}")
    if img.ndim == 2:
        out = ndimage.convolve(img, k, mode="reflect")
    else:
        out = np.stack([ndimage.convolve(ch, k, mode="reflect") for ch in img])
    return np.clip(out, 0.0, 1.0) if clamp else out


def make_blur_pair(sharp: np.ndarray, seed: int, params: TrajectoryParams = TrajectoryParams(),
                   k_psf: int = 17) -> BlurPair:
    psf = rasterize_psf(sample_trajectory(params, seed), k_psf)
    blurred = apply_blur(sharp, psf).astype(np.asarray(sharp).dtype)
    return BlurPair(np.asarray(sharp), blurred, psf, seed, params)


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class StatsRow:
    psnr_bin: float  # floor of PSNR in dB; inf for identical pairs
    count: int
    mean_ssim: float


def blur_stats(pairs) -> list[StatsRow]:
    """Image count and mean SSIM per integer PSNR bin, ascending (inf last)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("blur_stats needs at least one pair")
    bins: dict[float, list[float]] = {}
    for p in pairs:
        sharp, blurred = (p.sharp, p.blurred) if isinstance(p, BlurPair) else p
        db = psnr(sharp, blurred)
        key = math.inf if math.isinf(db) else float(math.floor(db))
        bins.setdefault(key, []).append(ssim(sharp, blurred))
    return [StatsRow(k, len(v), float(np.mean(v))) for k, v in sorted(bins.items())]


def find_modes(rows: list[StatsRow]) -> list[float]:
    """Peak bin of each run of consecutive occupied PSNR bins."""
    modes, run = [], []
    for row in rows:
        if run and (math.isinf(row.psnr_bin) or row.psnr_bin != run[-1].psnr_bin + 1):
            modes.append(max(run, key=lambda r: r.count).psnr_bin)
            run = []
        run.append(row)
    if run:
        modes.append(max(run, key=lambda r: r.count).psnr_bin)
    return modes


def write_stats_csv(rows: list[StatsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["psnr_bin", "count", "mean_ssim"])
        for r in rows:
            w.writerow(["inf" if math.isinf(r.psnr_bin) else int(r.psnr_bin), r.count, f"{r.mean_ssim:.6f}"])
