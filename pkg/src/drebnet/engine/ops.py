"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects; non-tensor operands
are treated as constants in the dtype of the tensor operand.  Images and
feature maps are NCHW; ``conv2d`` also accepts a single CHW map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fft as _fft
from . import flops as _flops
from .tensor import EngineError, Tensor, record


def _pair(a, b):
    """Coerce a binary operand pair to tensors sharing one float dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pointwise(out: np.ndarray, per_elem: int = 1) -> None:
    _flops.add("pointwise", out.size * per_elem)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    _pointwise(out)
    sa, sb = a.shape, b.shape
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    _pointwise(out)
    sa, sb = a.shape, b.shape
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    _pointwise(out)
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    _pointwise(out)
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape),
                             _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(x: Tensor) -> Tensor:
    return record("neg", -x.data, (x,), lambda g: (-g,))


def pow(x: Tensor, p: float) -> Tensor:
    xd = x.data
    out = xd ** p
    _pointwise(out)
    return record("pow", out, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _pointwise(out)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    out = np.log(xd)
    _pointwise(out)
    return record("log", out, (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    _pointwise(out)
    return record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:
    xd = x.data
    _pointwise(xd)
    return record("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def cos(x: Tensor) -> Tensor:
    xd = x.data
    _pointwise(xd)
    return record("cos", np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def sin(x: Tensor) -> Tensor:
    xd = x.data
    _pointwise(xd)
    return record("sin", np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    _pointwise(xd)
    return record("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ------------------------------------------------------------ nonlinearities

def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    _pointwise(xd)
    return record("relu", xd * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    _pointwise(out, 4)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# --------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = np.asarray(xd.sum(axis=axis, keepdims=keepdims))
    _pointwise(xd)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return record("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------ shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape
    out = np.array(x.data[key])

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return record("getitem", out, (x,), bw)


Tensor.__getitem__ = getitem


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# ----------------------------------------------------------- convolutions

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Rows are output pixels (n, ho, wo); columns are ordered (kh, kw, c)."""
    n, c = x.shape[:2]
    x = x.transpose(0, 2, 3, 1)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    gc = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gc[:, :, :, i, j]
    out = out[:, pad:hp - pad, pad:wp - pad] if pad else out
    return out.transpose(0, 3, 1, 2)


def _kernel_matrix(wd: np.ndarray) -> np.ndarray:
    # (C_out, C_in, kh, kw) -> (C_out, kh*kw*C_in) matching the im2col column order
    return wd.transpose(0, 2, 3, 1).reshape(wd.shape[0], -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW (or CHW) input with a (C_out, C_in, kh, kw) kernel."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise EngineError(f"conv2d expects NCHW input and 4-D weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise EngineError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise EngineError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if stride < 1 or kh < 1 or kw < 1:
        raise EngineError("conv2d needs stride >= 1 and kernel >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise EngineError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    xd, wd = x.data, weight.data
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    if ho * wo == 0:
        raise EngineError("conv2d produces an empty output")
    wmat = _kernel_matrix(wd)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    _flops.add("conv", n * cout * ho * wo * cin * kh * kw)
    if bias is not None:
        _flops.add("bias", n * cout * ho * wo)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = _col2im(g2 @ wmat, xd.shape, kh, kw, stride, padding, ho, wo)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 1) -> Tensor:
    """Adjoint of ``conv2d``'s input map; weight is (C_in, C_out, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise EngineError(f"conv_transpose2d expects NCHW input and 4-D weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise EngineError(f"conv_transpose2d channel mismatch: input has {cin}, weight expects {wcin}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise EngineError("conv_transpose2d produces an empty output")
    xd, wd = x.data, weight.data
    xmat = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = wd.transpose(0, 2, 3, 1).reshape(cin, -1)
    out = _col2im(xmat @ wmat, (n, cout, ho, wo), kh, kw, stride, padding, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]
    _flops.add("conv", n * cin * h * w * cout * kh * kw)
    if bias is not None:
        _flops.add("bias", n * cout * ho * wo)

    def bw(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        gx = (gcols @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        gw = (xmat.T @ gcols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv_transpose2d", out, inputs, bw)


# --------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None,
               running_var: np.ndarray | None, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the running statistics are updated in place.
    """
    if eps <= 0:
        raise EngineError("batch_norm eps must be positive")
    if x.ndim != 4:
        raise EngineError(f"batch_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise EngineError(f"batch_norm parameter shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    xd = x.data
    axes = (0, 2, 3)
    if training:
        m = n * h * w
        if m < 2:
            raise EngineError("batch_norm in train mode needs N*H*W >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        if running_mean is None or running_var is None:
            raise EngineError("batch_norm in eval mode needs populated running statistics")
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]
    _flops.add("norm", 2 * out.size)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        scale = (gd * inv)[None, :, None, None]
        if training:
            m = n * h * w
            gx = scale / m * (m * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
        else:
            gx = g * scale
        return gx, ggamma, gbeta

    return record("batch_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------- pooling / resize

def adaptive_avg_pool(x: Tensor, out_hw=(1, 1)) -> Tensor:
    if tuple(out_hw) != (1, 1):
        raise EngineError("only global (1, 1) adaptive pooling is supported")
    if x.ndim not in (3, 4):
        raise EngineError(f"adaptive_avg_pool expects CHW or NCHW, got {x.shape}")
    return mean(x, axis=(-2, -1), keepdims=True)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xd = x.data
    out = xd.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = xd.shape

    def bw(g):
        g = g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2))
        return (g.sum(axis=(-3, -1)),)

    return record("upsample_nearest2x", out, (x,), bw)


def upsample2x(x: Tensor, mode: str = "nearest", weight: Tensor | None = None,
               bias: Tensor | None = None) -> Tensor:
    """Spatial doubling, either by replication or a kernel-4 stride-2 pad-1 transposed conv."""
    if mode == "nearest":
        return upsample_nearest2x(x)
    if mode == "transposed_conv":
        if weight is None or weight.shape[2:] != (4, 4):
            raise EngineError("transposed-conv upsampling needs a (C_in, C_out, 4, 4) weight")
        squeeze = x.ndim == 3
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        out = conv_transpose2d(x, weight, bias, stride=2, padding=1)
        return reshape(out, out.shape[1:]) if squeeze else out
    raise ValueError(f"unknown upsample mode {mode!r}")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.array([(n_in - 1) / 2])
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def resize_bilinear(x: Tensor, out_hw) -> Tensor:
    """Corner-aligned bilinear resampling of the last two axes."""
    ho, wo = out_hw
    ry = _interp_matrix(x.shape[-2], ho).astype(x.dtype)
    rx = _interp_matrix(x.shape[-1], wo).astype(x.dtype)
    out = ry @ x.data @ rx.T
    return record("resize_bilinear", out, (x,), lambda g: (ry.T @ g @ rx,))


# ------------------------------------------------------------ spectral ops

@dataclass
class ComplexGrid:
    """Half spectrum of a real signal, shape (..., H, W//2 + 1) for both parts."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise EngineError(f"ComplexGrid parts differ in shape: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape


def _spectral_flops(shape, w) -> None:
    h = shape[-2]
    batch = int(np.prod(shape[:-2], dtype=np.int64))
    per = h * _fft.fft_flops(w) + (w // 2 + 1) * _fft.fft_flops(h)
    _flops.add("fft", batch * per)


def rfft2(x: Tensor) -> ComplexGrid:
    """Half-spectrum 2-D DFT over the last two axes."""
    xd = x.data
    h, w = xd.shape[-2:]
    spec = _fft.rfft2_array(xd)
    _spectral_flops(xd.shape, w)
    stacked = np.stack([spec.real, spec.imag]).astype(xd.dtype)

    def bw(g):
        gz = g[0] + 1j * g[1]
        full = np.zeros(gz.shape[:-1] + (w,), dtype=np.complex128)
        full[..., : gz.shape[-1]] = gz
        gx = _fft.fft(_fft.fft(full, axis=-2, inverse=True), axis=-1, inverse=True).real
        return (gx.astype(xd.dtype),)

    both = record("rfft2", stacked, (x,), bw)
    return ComplexGrid(getitem(both, 0), getitem(both, 1))


def irfft2(spec: ComplexGrid, out_w: int) -> Tensor:
    """Real inverse of ``rfft2``; the imaginary parts of DC/Nyquist columns are ignored."""
    re, im = spec.real, spec.imag
    h, wh = re.shape[-2:]
    if wh != out_w // 2 + 1:
        raise EngineError(f"irfft2: spectrum width {wh} inconsistent with out_w={out_w}")
    out = _fft.irfft2_array(re.data + 1j * im.data, out_w).astype(re.dtype)
    _spectral_flops(out.shape, out_w)
    c = _fft.half_weights(out_w) / (h * out_w)

    def bw(g):
        gs = _fft.rfft2_array(g) * c
        return gs.real.astype(re.dtype), gs.imag.astype(re.dtype)

    return record("irfft2", out, (re, im), bw)


def complex_abs(re: Tensor, im: Tensor) -> Tensor:
    """Amplitude |z|; the derivative is defined as zero at z == 0."""
    rd, idd = re.data, im.data
    amp = np.hypot(rd, idd)
    _pointwise(amp, 3)
    safe = np.where(amp > 0, amp, 1.0)
    nz = amp > 0

    def bw(g):
        return g * rd / safe * nz, g * idd / safe * nz

    return record("complex_abs", amp, (re, im), bw)


def complex_angle(re: Tensor, im: Tensor) -> Tensor:
    """Phase arg(z) via atan2; the derivative is defined as zero at z == 0."""
    rd, idd = re.data, im.data
    ang = np.arctan2(idd, rd)
    _pointwise(ang, 3)
    r2 = rd * rd + idd * idd
    nz = r2 > 0
    safe = np.where(nz, r2, 1.0)

    def bw(g):
        return -g * idd / safe * nz, g * rd / safe * nz

    return record("complex_angle", ang, (re, im), bw)
