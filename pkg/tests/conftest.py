import numpy as np
import pytest

from drebnet.config import RunConfig
from drebnet.engine import default_dtype, reset_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_dft2(x):
    """O(N^2) reference DFT over the last two axes, full spectrum."""
    h, w = x.shape[-2:]
    ky = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    kx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = np.zeros(x.shape, dtype=complex)
    for u in range(h):
        for v in range(w):
            out[..., u, v] = np.sum(x * ky[u][:, None] * kx[v][None, :], axis=(-2, -1))
    return out


def naive_conv2d(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, c, y * stride + dy, xx * stride + dx] * w[o, c, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def toy_run_config(tmp_path, epochs=5, ratio=0.6, n_images=4):
    cfg = RunConfig(seed=3, out_dir=str(tmp_path / "run"), phase_switch_ratio=ratio)
    cfg.model.base_channels = 8
    cfg.optim.total_epochs = epochs
    cfg.optim.batch_size = 2
    cfg.data.synthetic_images = n_images
    return cfg
