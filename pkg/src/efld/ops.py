"""The five layer primitives with forward and tape-recorded backward passes.

All ops are pure functions of their inputs: they never mutate arguments and
are safe to call concurrently. Feature maps are batch/height/width/channel.
Same-padding pads with zeros, output size ceil(size/stride), with the extra
pixel on the bottom/right.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import LayerParams, Tape, Tensor


def _check_params(op: str, x: Tensor, params: LayerParams, kind: str) -> None:
    if params.kind != kind:
        raise ShapeError(op, f"expected {kind} params, got {params.kind}")
    if params.weights.dtype != x.dtype:
        raise ShapeError(
            op, f"dtype mismatch: input {x.dtype}, weights {params.weights.dtype}"
        )


def _out_and_pad(op: str, size: int, k: int, stride: int, padding: str):
    """Output size plus (before, after) zero padding for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ShapeError(op, f"kernel {k} exceeds input extent {size} with valid padding")
        return (size - k) // stride + 1, 0, 0
    raise UsageError(f"{op}: padding must be 'same' or 'valid', got {padding!r}")


def _check_stride(op: str, stride: int) -> None:
    if stride not in (1, 2):
        raise UsageError(f"{op}: stride must be 1 or 2, got {stride}")


def _strided_window(padded, i, j, stride, out_h, out_w):
    return padded[
        :,
        i : i + (out_h - 1) * stride + 1 : stride,
        j : j + (out_w - 1) * stride + 1 : stride,
        :,
    ]


def conv2d(
    x: Tensor,
    params: LayerParams,
    stride: int = 1,
    padding: str = "same",
    tape: Tape | None = None,
) -> Tensor:
    """Conventional 2-D convolution: out[b,y,x,co] = bias[co] + sum over the
    receptive field of input * weight."""
    _check_params("conv2d", x, params, "conv")
    _check_stride("conv2d", stride)
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("conv2d", f"input must be rank 4, got shape {tuple(xd.shape)}")
    w = params.weights.data
    b = params.bias.data
    kh, kw, cin, cout = w.shape
    if xd.shape[3] != cin:
        raise ShapeError(
            "conv2d",
            f"input channels {xd.shape[3]} do not match kernel input channels {cin} "
            f"(input {tuple(xd.shape)}, weights {tuple(w.shape)})",
        )
    batch, h, wdt, _ = xd.shape
    out_h, pt, pb = _out_and_pad("conv2d", h, kh, stride, padding)
    out_w, pl, pr = _out_and_pad("conv2d", wdt, kw, stride, padding)
    padded = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    out = np.zeros((batch, out_h, out_w, cout), dtype=xd.dtype)
    flat = out.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            window = _strided_window(padded, i, j, stride, out_h, out_w)
            flat += window.reshape(-1, cin) @ w[i, j]
    out += b
    result = Tensor(out)

    if tape is not None:
        def backward_fn(grad, grads):
            g2 = grad.reshape(-1, cout)
            dw = np.empty_like(w)
            dpadded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    window = _strided_window(padded, i, j, stride, out_h, out_w)
                    dw[i, j] = window.reshape(-1, cin).T @ g2
                    _strided_window(dpadded, i, j, stride, out_h, out_w)[...] += grad @ w[i, j].T
            dx = dpadded[:, pt : pt + h, pl : pl + wdt, :]
            grads.accumulate(x, dx)
            grads.accumulate(params.weights, dw)
            grads.accumulate(params.bias, grad.sum(axis=(0, 1, 2)))

        tape.record("conv2d", result, backward_fn)
    return result


def depthwise_conv2d(
    x: Tensor,
    params: LayerParams,
    stride: int = 1,
    padding: str = "same",
    tape: Tape | None = None,
) -> Tensor:
    """Per-channel 2-D convolution: each channel gets its own kh x kw filter
    plus a per-channel bias. The kernel may span the full spatial extent."""
    _check_params("depthwise_conv2d", x, params, "depthwise-conv")
    _check_stride("depthwise_conv2d", stride)
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("depthwise_conv2d", f"input must be rank 4, got shape {tuple(xd.shape)}")
    w = params.weights.data
    b = params.bias.data
    kh, kw, c = w.shape
    if xd.shape[3] != c:
        raise ShapeError(
            "depthwise_conv2d",
            f"input channels {xd.shape[3]} do not match filter channels {c} "
            f"(input {tuple(xd.shape)}, weights {tuple(w.shape)})",
        )
    batch, h, wdt, _ = xd.shape
    out_h, pt, pb = _out_and_pad("depthwise_conv2d", h, kh, stride, padding)
    out_w, pl, pr = _out_and_pad("depthwise_conv2d", wdt, kw, stride, padding)
    padded = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    out = np.zeros((batch, out_h, out_w, c), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _strided_window(padded, i, j, stride, out_h, out_w) * w[i, j]
    out += b
    result = Tensor(out)

    if tape is not None:
        def backward_fn(grad, grads):
            dw = np.empty_like(w)
            dpadded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    window = _strided_window(padded, i, j, stride, out_h, out_w)
                    dw[i, j] = (window * grad).sum(axis=(0, 1, 2))
                    _strided_window(dpadded, i, j, stride, out_h, out_w)[...] += grad * w[i, j]
            dx = dpadded[:, pt : pt + h, pl : pl + wdt, :]
            grads.accumulate(x, dx)
            grads.accumulate(params.weights, dw)
            grads.accumulate(params.bias, grad.sum(axis=(0, 1, 2)))

        tape.record("depthwise_conv2d", result, backward_fn)
    return result


def separable_conv2d(
    x: Tensor,
    depthwise_params: LayerParams,
    pointwise_params: LayerParams,
    stride: int = 1,
    tape: Tape | None = None,
) -> Tensor:
    """Depthwise 3x3 (stride s) followed by pointwise 1x1 (stride 1)."""
    if pointwise_params.weights.shape[:2] != (1, 1):
        raise ShapeError(
            "separable_conv2d",
            f"pointwise kernel must be 1x1, got {tuple(pointwise_params.weights.shape)}",
        )
    if depthwise_params.weights.shape[2] != pointwise_params.weights.shape[2]:
        raise ShapeError(
            "separable_conv2d",
            f"depthwise channels {depthwise_params.weights.shape[2]} do not match "
            f"pointwise input channels {pointwise_params.weights.shape[2]}",
        )
    mid = depthwise_conv2d(x, depthwise_params, stride=stride, padding="same", tape=tape)
    return conv2d(mid, pointwise_params, stride=1, padding="same", tape=tape)


def linear(x: Tensor, params: LayerParams, tape: Tape | None = None) -> Tensor:
    """Affine map over flat vectors: out = x @ W + bias."""
    _check_params("linear", x, params, "linear")
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("linear", f"input must be rank 2, got shape {tuple(xd.shape)}")
    w = params.weights.data
    if xd.shape[1] != w.shape[0]:
        raise ShapeError(
            "linear",
            f"input width {xd.shape[1]} does not match weight rows {w.shape[0]} "
            f"(input {tuple(xd.shape)}, weights {tuple(w.shape)})",
        )
    out = xd @ w + params.bias.data
    result = Tensor(out)

    if tape is not None:
        def backward_fn(grad, grads):
            grads.accumulate(x, grad @ w.T)
            grads.accumulate(params.weights, xd.T @ grad)
            grads.accumulate(params.bias, grad.sum(axis=0))

        tape.record("linear", result, backward_fn)
    return result


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    xd = x.data
    result = Tensor(np.maximum(xd, 0))

    if tape is not None:
        def backward_fn(grad, grads):
            grads.accumulate(x, grad * (xd > 0))

        tape.record("relu", result, backward_fn)
    return result


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Concatenate along the channel (or vector) axis, ``a`` first."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.shape[:-1] != bd.shape[:-1]:
        raise ShapeError(
            "concat_channels",
            f"non-channel dims differ: {tuple(ad.shape)} vs {tuple(bd.shape)}",
        )
    if ad.dtype != bd.dtype:
        raise ShapeError("concat_channels", f"dtype mismatch: {ad.dtype} vs {bd.dtype}")
    split = ad.shape[-1]
    result = Tensor(np.concatenate([ad, bd], axis=-1))

    if tape is not None:
        def backward_fn(grad, grads):
            grads.accumulate(a, grad[..., :split])
            grads.accumulate(b, grad[..., split:])

        tape.record("concat_channels", result, backward_fn)
    return result


def flatten_rows(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Reshape (B, ...) to (B, -1) preserving row-major order."""
    xd = x.data
    result = Tensor(xd.reshape(xd.shape[0], -1))

    if tape is not None:
        def backward_fn(grad, grads):
            grads.accumulate(x, grad.reshape(xd.shape))

        tape.record("reshape", result, backward_fn)
    return result
