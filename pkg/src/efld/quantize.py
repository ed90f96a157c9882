"""Int8 post-training quantization with min/max calibration, plus an
integer-only inference path.

Weights are per-tensor symmetric (zero point 0); activations are per-site
asymmetric, mapping the calibrated [min, max] onto [-128, 127]; biases are
int32 at input_scale * weight_scale. Requantization multiplies the integer
accumulator by a double-precision constant, rounds half away from zero, and
clamps, which pins a bit-exact, platform-independent contract.

Integer accumulations run in float64: every intermediate value is an exact
integer far below 2**53, so the arithmetic is exact and bit-deterministic
while still using fast vectorized kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ShapeError, UsageError
from .model import Model, ModelConfig, iter_layers, model_forward
from .ops import _out_and_pad, _strided_window
from .tensor import Tensor

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
QMIN, QMAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


def _round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping: real = (q - zero_point) * scale."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise UsageError(f"quantization scale must be > 0, got {self.scale}")
        if not (QMIN <= self.zero_point <= QMAX):
            raise UsageError(f"zero point {self.zero_point} outside [{QMIN}, {QMAX}]")


def quantize_value(x, qp: QuantParams):
    """q = clamp(round(x / scale) + zero_point, -128, 127), saturating,
    round half away from zero. Nondecreasing in x."""
    q = _round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    q = np.clip(q, QMIN, QMAX).astype(np.int8)
    return q if q.ndim else q[()]


def dequantize_value(q, qp: QuantParams):
    x = (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale
    return x if x.ndim else float(x)


def params_from_range(lo: float, hi: float, site: str = "") -> QuantParams:
    """Asymmetric params mapping [lo, hi] onto [-128, 127]."""
    scale = (hi - lo) / 255.0
    if scale < SCALE_FLOOR:
        log.warning("site %s has constant activations (range [%g, %g]); flooring scale",
                    site or "?", lo, hi)
        scale = SCALE_FLOOR
    zp = int(np.clip(-128.0 - float(_round_half_away(lo / scale)), QMIN, QMAX))
    return QuantParams(scale=scale, zero_point=zp)


@dataclass(frozen=True)
class PlanStep:
    """One op of the integer execution plan, keyed by activation sites."""

    op: str  # conv | depthwise | linear | relu | concat | head_out
    layer: str | None
    inputs: tuple
    output: str | None
    stride: int = 1
    padding: str = "same"
    flatten: bool = False
    fmt: str | None = None


def build_plan(config: ModelConfig) -> list:
    """The integer execution plan; mirrors the float forward pass exactly."""
    steps = []
    prev = "input"
    for i, ec in enumerate(config.eosa, 1):
        base = f"eosa{i}"
        branch_sites = []
        if ec.extra_conv == "conventional":
            steps.append(PlanStep("conv", f"{base}.extra", (prev,), f"{base}.extra.out", 2))
            steps.append(PlanStep("relu", None, (f"{base}.extra.out",), f"{base}.extra.relu"))
            branch_sites.append(f"{base}.extra.relu")
        else:
            steps.append(PlanStep("depthwise", f"{base}.extra.dw", (prev,), f"{base}.extra.dw.out", 2))
            steps.append(PlanStep("relu", None, (f"{base}.extra.dw.out",), f"{base}.extra.dw.relu"))
            steps.append(PlanStep("conv", f"{base}.extra.pw", (f"{base}.extra.dw.relu",),
                                  f"{base}.extra.pw.out", 1))
            steps.append(PlanStep("relu", None, (f"{base}.extra.pw.out",), f"{base}.extra.pw.relu"))
            branch_sites.append(f"{base}.extra.pw.relu")
        chain = prev
        for j in range(ec.n_osa):
            stride = 2 if j == 0 else 1
            steps.append(PlanStep("conv", f"{base}.osa.l{j}", (chain,), f"{base}.osa.l{j}.out", stride))
            steps.append(PlanStep("relu", None, (f"{base}.osa.l{j}.out",), f"{base}.osa.l{j}.relu"))
            chain = f"{base}.osa.l{j}.relu"
            branch_sites.append(chain)
        steps.append(PlanStep("concat", None, tuple(branch_sites), f"{base}.concat"))
        prev = f"{base}.concat"
    steps.append(PlanStep("conv", "decoder.pw", (prev,), "decoder.pw.out", 1))
    steps.append(PlanStep("relu", None, ("decoder.pw.out",), "decoder.pw.relu"))
    steps.append(PlanStep("depthwise", "decoder.dw", ("decoder.pw.relu",), "decoder.out",
                          1, "valid", flatten=True))
    for hc in config.heads:
        base = f"head.{hc.format}"
        feed = "decoder.out"
        if config.head_kind == "efld":
            for j in range(hc.blocks):
                steps.append(PlanStep("linear", f"{base}.block{j}", (feed,), f"{base}.block{j}.out"))
                steps.append(PlanStep("relu", None, (f"{base}.block{j}.out",), f"{base}.block{j}.relu"))
                steps.append(PlanStep("concat", None, (feed, f"{base}.block{j}.relu"),
                                      f"{base}.block{j}.concat"))
                feed = f"{base}.block{j}.concat"
        steps.append(PlanStep("head_out", f"{base}.out", (feed,), f"{base}.out", fmt=hc.format))
    return steps


def plan_sites(config: ModelConfig) -> list:
    """Every activation site, in execution order, starting at the input."""
    sites = ["input"]
    for step in build_plan(config):
        if step.output not in sites:
            sites.append(step.output)
    return sites


def layer_input_sites(config: ModelConfig) -> dict:
    return {step.layer: step.inputs[0] for step in build_plan(config) if step.layer}


def calibrate(model: Model, dataset, batch_size: int = 32) -> dict:
    """Float forward passes over every calibration sample, recording global
    per-site min/max and deriving asymmetric int8 params. Sites after ReLU
    get their min clamped to 0 so exact zero stays representable."""
    samples = list(dataset)
    if not samples:
        raise UsageError("calibrate requires a nonempty dataset")
    ranges = {}

    def observer(site, value):
        lo, hi = float(value.min()), float(value.max())
        if site in ranges:
            old_lo, old_hi = ranges[site]
            ranges[site] = (min(old_lo, lo), max(old_hi, hi))
        else:
            ranges[site] = (lo, hi)

    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk]).astype(model.dtype)
        model_forward(model, Tensor(images), tape=None, observer=observer)

    params = {}
    for site, (lo, hi) in ranges.items():
        if site.endswith(".relu"):
            lo = 0.0
        params[site] = params_from_range(lo, hi, site)
    return params


class QuantizedModel:
    """Int8 weights/activations with per-tensor scale and zero point, plus
    the float reference config. Immutable; concurrent forwards are safe."""

    def __init__(self, config: ModelConfig, weights: dict, weight_scales: dict,
                 biases: dict, bias_scales: dict, activations: dict):
        self.config = config
        self.weights = weights
        self.weight_scales = weight_scales
        self.biases = biases
        self.bias_scales = bias_scales
        self.activations = activations

    @property
    def dtype(self) -> str:
        return "int8"

    def head_formats(self) -> tuple:
        return tuple(h.format for h in self.config.heads)

    def weight_byte_count(self) -> int:
        return sum(w.size for w in self.weights.values())

    def parameter_count(self) -> int:
        return self.weight_byte_count() + sum(b.size for b in self.biases.values())


def quantize_model(model: Model, activations: dict) -> QuantizedModel:
    """Per-tensor symmetric weights (scale = max|w| / 127), int32 biases at
    input_scale * weight_scale."""
    config = model.config
    for site in plan_sites(config):
        if site not in activations:
            raise CalibrationError(f"calibration does not cover site {site!r}")
    in_sites = layer_input_sites(config)
    weights, weight_scales, biases, bias_scales = {}, {}, {}, {}
    for spec in iter_layers(config):
        w = model.params[spec.name + ".w"].data.astype(np.float64)
        b = model.params[spec.name + ".b"].data.astype(np.float64)
        w_scale = float(np.abs(w).max()) / QMAX
        if w_scale < SCALE_FLOOR:
            w_scale = SCALE_FLOOR
        q_w = np.clip(_round_half_away(w / w_scale), QMIN, QMAX).astype(np.int8)
        in_scale = activations[in_sites[spec.name]].scale
        b_scale = in_scale * w_scale
        q_b = np.clip(_round_half_away(b / b_scale), INT32_MIN, INT32_MAX).astype(np.int32)
        weights[spec.name] = q_w
        weight_scales[spec.name] = w_scale
        biases[spec.name] = q_b
        bias_scales[spec.name] = b_scale
    return QuantizedModel(config, weights, weight_scales, biases, bias_scales, dict(activations))


def _requant(values, in_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    shifted = values.astype(np.float64) - in_qp.zero_point
    scaled = _round_half_away(shifted * (in_qp.scale / out_qp.scale)) + out_qp.zero_point
    return np.clip(scaled, QMIN, QMAX).astype(np.int8)


def _requant_acc(acc, multiplier: float, zp_out: int) -> np.ndarray:
    q = _round_half_away(acc * multiplier) + zp_out
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def _accumulate_conv(x, w, bias, stride, padding, depthwise: bool):
    """Integer accumulation in exact float64; x is already zero-point shifted."""
    op = "quantized_forward"
    batch, h, wdt, _ = x.shape
    kh, kw = w.shape[0], w.shape[1]
    out_h, pt, pb = _out_and_pad(op, h, kh, stride, padding)
    out_w, pl, pr = _out_and_pad(op, wdt, kw, stride, padding)
    padded = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    cout = w.shape[-1]
    acc = np.zeros((batch, out_h, out_w, cout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            window = _strided_window(padded, i, j, stride, out_h, out_w)
            if depthwise:
                acc += window * w[i, j]
            else:
                acc.reshape(-1, cout)[...] += window.reshape(-1, w.shape[2]) @ w[i, j]
    acc += bias
    return acc


def quantized_forward(qmodel: QuantizedModel, images) -> dict:
    """Integer-only inference. Convolutions and linears accumulate int values
    and requantize to each output site; ReLU runs in the quantized domain;
    concat operands are requantized to the shared output site. The final head
    accumulator is dequantized directly to reals."""
    config = qmodel.config
    act = qmodel.activations
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    s = config.input_size
    if arr.shape[1:] != (s, s, 3):
        raise ShapeError(
            "quantized_forward", f"expected images (B, {s}, {s}, 3), got {tuple(arr.shape)}"
        )
    values = {"input": quantize_value(arr, act["input"])}
    results = {}
    for step in build_plan(config):
        if step.op in ("conv", "depthwise", "linear", "head_out"):
            in_qp = act[step.inputs[0]]
            q_x = values[step.inputs[0]].astype(np.float64) - in_qp.zero_point
            w = qmodel.weights[step.layer].astype(np.float64)
            bias = qmodel.biases[step.layer].astype(np.float64)
            if step.op in ("conv", "depthwise"):
                acc = _accumulate_conv(q_x, w, bias, step.stride, step.padding,
                                       depthwise=(step.op == "depthwise"))
                if step.flatten:
                    acc = acc.reshape(acc.shape[0], -1)
            else:
                acc = q_x @ w + bias
            multiplier = in_qp.scale * qmodel.weight_scales[step.layer]
            if step.op == "head_out":
                results[step.fmt] = acc * multiplier
            else:
                out_qp = act[step.output]
                values[step.output] = _requant_acc(acc, multiplier / out_qp.scale,
                                                   out_qp.zero_point)
        elif step.op == "relu":
            in_qp = act[step.inputs[0]]
            clamped = np.maximum(values[step.inputs[0]], in_qp.zero_point)
            values[step.output] = _requant(clamped, in_qp, act[step.output])
        elif step.op == "concat":
            out_qp = act[step.output]
            parts = [_requant(values[site], act[site], out_qp) for site in step.inputs]
            values[step.output] = np.concatenate(parts, axis=-1)
        else:
            raise UsageError(f"unknown plan op {step.op!r}")
    return results
