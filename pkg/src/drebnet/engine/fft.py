"""Complex FFT along one axis: iterative radix-2 for powers of two, Bluestein otherwise.

All transforms here are unnormalized; ``inverse=True`` only flips the sign of
the exponent.  ``rfft2_array`` / ``irfft2_array`` follow the usual half-spectrum
conventions (the inverse ignores the imaginary part of the DC and Nyquist
columns).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=64)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=128)
def _twiddles(m: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(m) / (2 * m))


def _fft_pow2(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = x[..., _bitrev(n)]
    m = 1
    while m < n:
        y = y.reshape(lead + (n // (2 * m), 2, m))
        even = y[..., 0, :]
        odd = y[..., 1, :] * _twiddles(m, inverse)
        y = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return y.reshape(lead + (n,))


@lru_cache(maxsize=64)
def _bluestein_plan(n: int, inverse: bool):
    sign = 1.0 if inverse else -1.0
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase accurate for large n
    chirp = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1
    while m < 2 * n - 1:
        m *= 2
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    return chirp, m, _fft_pow2(b, False)


def _fft_bluestein(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    chirp, m, fb = _bluestein_plan(n, inverse)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = _fft_pow2(_fft_pow2(a, False) * fb, True) / m
    return conv[..., :n] * chirp


def fft(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Unnormalized complex DFT of ``x`` along ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if n == 1:
        y = x.copy()
    elif _is_pow2(n):
        y = _fft_pow2(x, inverse)
    else:
        y = _fft_bluestein(x, inverse)
    return np.moveaxis(y, -1, axis)


def rfft2_array(x: np.ndarray) -> np.ndarray:
    """Half spectrum over the last two axes: shape (..., H, W//2 + 1)."""
    w = x.shape[-1]
    half = fft(x, axis=-1)[..., : w // 2 + 1]
    return fft(half, axis=-2)


def irfft2_array(spec: np.ndarray, out_w: int) -> np.ndarray:
    """Real inverse of ``rfft2_array`` (normalized by H*W)."""
    h, wh = spec.shape[-2], spec.shape[-1]
    if wh != out_w // 2 + 1:
        raise ValueError(f"spectrum width {wh} inconsistent with output width {out_w}")
    z = fft(spec, axis=-2, inverse=True)
    full = np.empty(spec.shape[:-1] + (out_w,), dtype=np.complex128)
    full[..., :wh] = z
    if out_w > wh:
        # Hermitian extension along the last axis
        full[..., wh:] = np.conj(z[..., 1: out_w - wh + 1][..., ::-1])
    x = fft(full, axis=-1, inverse=True).real
    return x / (h * out_w)


def half_weights(out_w: int) -> np.ndarray:
    """Multiplicity of each half-spectrum column in the full spectrum."""
    wh = out_w // 2 + 1
    c = np.full(wh, 2.0)
    c[0] = 1.0
    if out_w % 2 == 0:
        c[-1] = 1.0
    return c


def fft_flops(n: int) -> int:
    """Conventional 5 n log2 n estimate for one complex transform of length n."""
    if n <= 1:
        return 0
    return int(round(5 * n * np.log2(n)))
