"""Shared test oracles: naive loop-reference layers and finite differences.

These stay deliberately independent of the library's vectorized kernels so
they can serve as ground truth for them.
"""

import numpy as np
import pytest

from efld.model import EosaConfig, HeadConfig, ModelConfig


def _pad_split(size, k, stride, padding):
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2
    return (size - k) // stride + 1, 0


def ref_conv2d(x, w, b, stride=1, padding="same"):
    """Six-nested-loop conventional convolution with explicit zero padding."""
    batch, h, wdt, cin = x.shape
    kh, kw, _, cout = w.shape
    out_h, pt = _pad_split(h, kh, stride, padding)
    out_w, pl = _pad_split(wdt, kw, stride, padding)
    out = np.zeros((batch, out_h, out_w, cout), dtype=x.dtype)
    for bi in range(batch):
        for oy in range(out_h):
            for ox in range(out_w):
                for co in range(cout):
                    acc = b[co]
                    for i in range(kh):
                        for j in range(kw):
                            iy = oy * stride + i - pt
                            ix = ox * stride + j - pl
                            if 0 <= iy < h and 0 <= ix < wdt:
                                for ci in range(cin):
                                    acc += x[bi, iy, ix, ci] * w[i, j, ci, co]
                    out[bi, oy, ox, co] = acc
    return out


def ref_depthwise_conv2d(x, w, b, stride=1, padding="same"):
    """Per-channel loop convolution."""
    batch, h, wdt, c = x.shape
    kh, kw, _ = w.shape
    out_h, pt = _pad_split(h, kh, stride, padding)
    out_w, pl = _pad_split(wdt, kw, stride, padding)
    out = np.zeros((batch, out_h, out_w, c), dtype=x.dtype)
    for bi in range(batch):
        for oy in range(out_h):
            for ox in range(out_w):
                for ci in range(c):
                    acc = b[ci]
                    for i in range(kh):
                        for j in range(kw):
                            iy = oy * stride + i - pt
                            ix = ox * stride + j - pl
                            if 0 <= iy < h and 0 <= ix < wdt:
                                acc += x[bi, iy, ix, ci] * w[i, j, ci]
                    out[bi, oy, ox, ci] = acc
    return out


def central_difference(f, arrays, eps=1e-5):
    """d f() / d array for each array, perturbing elements in place."""
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = f()
            flat[i] = orig - eps
            minus = f()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
        grads.append(grad)
    return grads


def max_rel_error(analytic, numeric, floor=1e-4):
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def reduced_config(formats=("p51",), input_size=32, decoder_dim=128, width=16):
    """Halved-channel architecture used by the small training/gradient runs."""
    points = {"p51": 51, "p68": 68, "p98": 98, "p3": 3}
    return ModelConfig(
        input_size=input_size,
        eosa=(
            EosaConfig(2, 2, 4, "conventional"),
            EosaConfig(4, 3, 4, "depthwise-separable"),
            EosaConfig(8, 3, 8, "depthwise-separable"),
            EosaConfig(8, 3, 16, "depthwise-separable"),
        ),
        decoder_dim=decoder_dim,
        heads=tuple(HeadConfig(f, points[f], 3, width) for f in formats),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
