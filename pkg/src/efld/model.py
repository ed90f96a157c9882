"""Model configuration, parameter construction, and forward passes.

The backbone is four downscaling aggregation modules followed by a decoder.
Each module runs two stride-2 branches over the same input: an extra
convolution (conventional or depthwise-separable) and a chain of 3x3
convolutions whose per-layer outputs are all concatenated with the extra
branch. The decoder is a 1x1 convolution followed by a depthwise convolution
spanning the full spatial extent, flattened to the feature vector. Each
detection head grows the feature vector through concatenated linear blocks
and ends in a linear layer emitting (x, y) pairs in normalized crop
coordinates.

ReLU follows every convolution and every head block linear; there is no
activation after the decoder's depthwise layer or the final head linear, and
no normalization layers anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .ops import concat_channels, conv2d, depthwise_conv2d, flatten_rows, linear, relu
from .tensor import LayerParams, Tape, Tensor

EXTRA_CONV_KINDS = ("conventional", "depthwise-separable")
HEAD_KINDS = ("efld", "pfld-plain")
INPUT_CHANNELS = 3


@dataclass(frozen=True)
class EosaConfig:
    """One backbone module: chain width/depth plus the extra convolution."""

    f_osa: int
    n_osa: int
    f_conv: int
    extra_conv: str = "conventional"

    def validate(self, where: str = "eosa") -> None:
        if self.n_osa < 1:
            raise ConfigError(f"{where}: n_osa must be >= 1, got {self.n_osa}")
        if self.f_osa < 1 or self.f_conv < 1:
            raise ConfigError(f"{where}: channel counts must be >= 1")
        if self.extra_conv not in EXTRA_CONV_KINDS:
            raise ConfigError(f"{where}: unknown extra_conv kind {self.extra_conv!r}")

    @property
    def out_channels(self) -> int:
        return self.f_conv + self.n_osa * self.f_osa


@dataclass(frozen=True)
class HeadConfig:
    """One detection head: output format plus block count and width."""

    format: str
    points: int
    blocks: int = 3
    width: int = 32

    def validate(self) -> None:
        if self.points < 1:
            raise ConfigError(f"head {self.format!r}: points must be >= 1")
        if self.blocks < 0 or self.width < 1:
            raise ConfigError(f"head {self.format!r}: invalid blocks/width")


DEFAULT_EOSA = (
    EosaConfig(4, 2, 8, "conventional"),
    EosaConfig(8, 3, 8, "depthwise-separable"),
    EosaConfig(16, 3, 16, "depthwise-separable"),
    EosaConfig(16, 3, 32, "depthwise-separable"),
)


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description."""

    input_size: int = 128
    eosa: tuple = DEFAULT_EOSA
    decoder_dim: int = 256
    heads: tuple = (HeadConfig("p51", 51),)
    head_kind: str = "efld"

    def validate(self) -> None:
        divisor = 2 ** len(self.eosa)
        if self.input_size < divisor or self.input_size % divisor != 0:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by {divisor} "
                f"(one halving per backbone module)"
            )
        for i, ec in enumerate(self.eosa, 1):
            ec.validate(f"eosa.{i}")
        if self.decoder_dim < 1:
            raise ConfigError("decoder_dim must be >= 1")
        if not self.heads:
            raise ConfigError("at least one head is required")
        names = [h.format for h in self.heads]
        if len(set(names)) != len(names):
            raise ConfigError(f"head format names must be distinct, got {names}")
        for h in self.heads:
            h.validate()
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")

    @property
    def feature_map_size(self) -> int:
        return self.input_size // (2 ** len(self.eosa))

    def head(self, fmt: str) -> HeadConfig:
        for h in self.heads:
            if h.format == fmt:
                return h
        raise UsageError(
            f"unknown format {fmt!r}; available heads: {', '.join(h.format for h in self.heads)}"
        )

    def with_heads(self, formats) -> "ModelConfig":
        kept = tuple(h for h in self.heads if h.format in set(formats))
        return replace(self, heads=kept)


VARIANTS = ("default", "conv-backbone", "pfld-head")


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Architecture ablations: all-conventional extra convs, or plain heads."""
    if variant == "default":
        return config
    if variant == "conv-backbone":
        eosa = tuple(replace(ec, extra_conv="conventional") for ec in config.eosa)
        return replace(config, eosa=eosa)
    if variant == "pfld-head":
        return replace(config, head_kind="pfld-plain")
    raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one parameterized layer, used for construction and costing."""

    name: str
    kind: str  # conv | depthwise-conv | linear
    kernel: tuple  # (kh, kw) for convs, () for linear
    cin: int
    cout: int
    stride: int = 1
    padding: str = "same"
    out_hw: tuple = ()  # spatial output, filled when input_size known

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (*self.kernel, self.cin, self.cout)
        if self.kind == "depthwise-conv":
            return (*self.kernel, self.cout)
        return (self.cin, self.cout)

    @property
    def param_count(self) -> int:
        n = 1
        for d in self.weight_shape:
            n *= d
        return n + self.cout

    @property
    def fan_in(self) -> int:
        if self.kind == "conv":
            return self.kernel[0] * self.kernel[1] * self.cin
        if self.kind == "depthwise-conv":
            return self.kernel[0] * self.kernel[1]
        return self.cin


def head_widths(config: ModelConfig, hc: HeadConfig) -> list:
    """Feature widths entering each head block and the final linear."""
    widths = [config.decoder_dim]
    for _ in range(hc.blocks):
        widths.append(widths[-1] + hc.width)
    return widths


def iter_layers(config: ModelConfig) -> Iterator[LayerSpec]:
    """Every parameterized layer in construction order, with spatial sizes."""
    size = config.input_size
    cin = INPUT_CHANNELS
    for i, ec in enumerate(config.eosa, 1):
        out = -(-size // 2)
        base = f"eosa{i}"
        if ec.extra_conv == "conventional":
            yield LayerSpec(f"{base}.extra", "conv", (3, 3), cin, ec.f_conv, 2, "same", (out, out))
        else:
            yield LayerSpec(f"{base}.extra.dw", "depthwise-conv", (3, 3), cin, cin, 2, "same", (out, out))
            yield LayerSpec(f"{base}.extra.pw", "conv", (1, 1), cin, ec.f_conv, 1, "same", (out, out))
        chain_in = cin
        for j in range(ec.n_osa):
            stride = 2 if j == 0 else 1
            yield LayerSpec(
                f"{base}.osa.l{j}", "conv", (3, 3), chain_in, ec.f_osa, stride, "same", (out, out)
            )
            chain_in = ec.f_osa
        cin = ec.out_channels
        size = out
    yield LayerSpec("decoder.pw", "conv", (1, 1), cin, config.decoder_dim, 1, "same", (size, size))
    yield LayerSpec(
        "decoder.dw", "depthwise-conv", (size, size), config.decoder_dim, config.decoder_dim,
        1, "valid", (1, 1),
    )
    for hc in config.heads:
        out_dim = 2 * hc.points
        if config.head_kind == "pfld-plain":
            yield LayerSpec(f"head.{hc.format}.out", "linear", (), config.decoder_dim, out_dim)
            continue
        widths = head_widths(config, hc)
        for j in range(hc.blocks):
            yield LayerSpec(f"head.{hc.format}.block{j}", "linear", (), widths[j], hc.width)
        yield LayerSpec(f"head.{hc.format}.out", "linear", (), widths[-1], out_dim)


class Model:
    """Instantiated parameter set, addressable by stable hierarchical names.

    Parameter tensors are named ``<layer>.w`` and ``<layer>.b``. A built model
    is immutable during inference and safe for concurrent forward passes;
    training mutates parameters in place and requires exclusive access.
    """

    def __init__(self, config: ModelConfig, params: dict, dtype: str):
        self.config = config
        self.params = params
        self.dtype = dtype
        self._kinds = {spec.name: spec.kind for spec in iter_layers(config)}

    def layer(self, name: str) -> LayerParams:
        return LayerParams(self._kinds[name], self.params[name + ".w"], self.params[name + ".b"])

    def layer_names(self) -> list:
        return list(self._kinds)

    def head_formats(self) -> tuple:
        return tuple(h.format for h in self.config.heads)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())


def build_model(config: ModelConfig, seed: int = 0, dtype: str = "float32") -> Model:
    """Deterministically initialized model: uniform He-style fan-in scaling
    for weights, zero biases."""
    config.validate()
    if dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = {}
    for spec in iter_layers(config):
        limit = np.sqrt(6.0 / spec.fan_in)
        w = rng.uniform(-limit, limit, size=spec.weight_shape).astype(dtype)
        params[spec.name + ".w"] = Tensor(w)
        params[spec.name + ".b"] = Tensor(np.zeros(spec.cout, dtype=dtype))
    return Model(config, params, dtype)


def _observe(observer, site: str, value: Tensor) -> Tensor:
    if observer is not None:
        observer(site, value.data)
    return value


def eosa_forward(model: Model, index: int, x: Tensor, tape: Tape | None = None,
                 observer=None) -> Tensor:
    """Run backbone module ``index`` (1-based): both branches see the same
    input; the output concatenates the extra branch with every chain layer."""
    ec = model.config.eosa[index - 1]
    base = f"eosa{index}"
    if ec.extra_conv == "conventional":
        e = conv2d(x, model.layer(f"{base}.extra"), stride=2, padding="same", tape=tape)
        _observe(observer, f"{base}.extra.out", e)
        e = _observe(observer, f"{base}.extra.relu", relu(e, tape=tape))
    else:
        e = depthwise_conv2d(x, model.layer(f"{base}.extra.dw"), stride=2, padding="same", tape=tape)
        _observe(observer, f"{base}.extra.dw.out", e)
        e = _observe(observer, f"{base}.extra.dw.relu", relu(e, tape=tape))
        e = conv2d(e, model.layer(f"{base}.extra.pw"), stride=1, padding="same", tape=tape)
        _observe(observer, f"{base}.extra.pw.out", e)
        e = _observe(observer, f"{base}.extra.pw.relu", relu(e, tape=tape))
    out = e
    y = x
    for j in range(ec.n_osa):
        stride = 2 if j == 0 else 1
        y = conv2d(y, model.layer(f"{base}.osa.l{j}"), stride=stride, padding="same", tape=tape)
        _observe(observer, f"{base}.osa.l{j}.out", y)
        y = _observe(observer, f"{base}.osa.l{j}.relu", relu(y, tape=tape))
        out = concat_channels(out, y, tape=tape)
    return _observe(observer, f"{base}.concat", out)


def decoder_forward(model: Model, x: Tensor, tape: Tape | None = None, observer=None) -> Tensor:
    """1x1 convolution (ReLU) then full-extent depthwise convolution with no
    activation, flattened to the feature vector."""
    y = conv2d(x, model.layer("decoder.pw"), stride=1, padding="same", tape=tape)
    _observe(observer, "decoder.pw.out", y)
    y = _observe(observer, "decoder.pw.relu", relu(y, tape=tape))
    dw = model.layer("decoder.dw")
    kh, kw, _ = dw.weights.shape
    if y.shape[1] != kh or y.shape[2] != kw:
        raise ShapeError(
            "decoder_forward",
            f"spatial size {y.shape[1]}x{y.shape[2]} does not match decoder kernel {kh}x{kw}",
        )
    y = depthwise_conv2d(y, dw, stride=1, padding="valid", tape=tape)
    return _observe(observer, "decoder.out", flatten_rows(y, tape=tape))


def head_forward(model: Model, fmt: str, v: Tensor, tape: Tape | None = None,
                 observer=None) -> Tensor:
    """One detection head on the shared feature vector; no final activation.
    Point k of the output lives at indices (2k, 2k+1)."""
    hc = model.config.head(fmt)
    base = f"head.{fmt}"
    if model.config.head_kind == "pfld-plain":
        out = linear(v, model.layer(f"{base}.out"), tape=tape)
        return _observe(observer, f"{base}.out", out)
    y = v
    for j in range(hc.blocks):
        z = linear(y, model.layer(f"{base}.block{j}"), tape=tape)
        _observe(observer, f"{base}.block{j}.out", z)
        z = _observe(observer, f"{base}.block{j}.relu", relu(z, tape=tape))
        y = _observe(observer, f"{base}.block{j}.concat", concat_channels(y, z, tape=tape))
    out = linear(y, model.layer(f"{base}.out"), tape=tape)
    return _observe(observer, f"{base}.out", out)


def backbone_forward(model: Model, images: Tensor, tape: Tape | None = None,
                     observer=None) -> Tensor:
    s = model.config.input_size
    if images.data.ndim != 4 or images.shape[1] != s or images.shape[2] != s \
            or images.shape[3] != INPUT_CHANNELS:
        raise ShapeError(
            "model_forward",
            f"expected images of shape (B, {s}, {s}, {INPUT_CHANNELS}), got {tuple(images.shape)}",
        )
    _observe(observer, "input", images)
    x = images
    for i in range(1, len(model.config.eosa) + 1):
        x = eosa_forward(model, i, x, tape=tape, observer=observer)
    return decoder_forward(model, x, tape=tape, observer=observer)


def model_forward(model: Model, images: Tensor, formats=None, tape: Tape | None = None,
                  observer=None) -> dict:
    """Backbone and decoder run once per batch; each requested head is applied
    to the shared feature vector. Returns {format: predictions (B, 2K)}."""
    available = model.head_formats()
    if formats is None:
        requested = available
    else:
        requested = tuple(f for f in available if f in set(formats))
        missing = set(formats) - set(available)
        if missing:
            raise UsageError(
                f"unknown format {', '.join(sorted(missing))}; available heads: "
                f"{', '.join(available)}"
            )
        if not requested:
            raise UsageError("no formats requested")
    v = backbone_forward(model, images, tape=tape, observer=observer)
    return {f: head_forward(model, f, v, tape=tape, observer=observer) for f in requested}


def default_config(formats=("p51",), points=None) -> ModelConfig:
    """The stock architecture with heads for the given formats."""
    table = {"p51": 51, "p68": 68, "p98": 98}
    if points:
        table.update(points)
    heads = tuple(HeadConfig(f, table[f]) for f in formats)
    return ModelConfig(heads=heads)
