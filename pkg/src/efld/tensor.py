"""Dense tensors, layer parameter containers, and the gradient tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense n-dimensional array of reals in row-major order.

    Feature maps use batch/height/width/channel layout; vectors are flat.
    The dtype is float64 in verification mode and float32 in training mode.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.dtype})"


LAYER_KINDS = ("conv", "depthwise-conv", "linear")


@dataclass
class LayerParams:
    """Weights plus one bias per output channel or unit for a single layer."""

    kind: str
    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError("layer-params", f"unknown layer kind {self.kind!r}")
        w, b = self.weights.shape, self.bias.shape
        expected_rank = {"conv": 4, "depthwise-conv": 3, "linear": 2}[self.kind]
        if len(w) != expected_rank:
            raise ShapeError(
                "layer-params",
                f"{self.kind} weights must be rank {expected_rank}, got shape {w}",
            )
        if len(b) != 1 or b[0] != w[-1]:
            raise ShapeError(
                "layer-params",
                f"{self.kind} bias shape {b} does not match {w[-1]} outputs (weights {w})",
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]


class Tape:
    """Ordered record of executed ops, enough to run the chain rule in reverse.

    Single-owner while recording. Each node holds the op name, the produced
    tensor, and a closure that pushes gradients to the op's inputs.
    """

    def __init__(self):
        self._nodes = []

    def record(self, op: str, output: Tensor, backward_fn) -> None:
        self._nodes.append((op, output, backward_fn))

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def last_output(self) -> Tensor:
        if not self._nodes:
            raise UsageError("backward before forward: tape is empty")
        return self._nodes[-1][1]

    def op_counts(self) -> dict:
        counts = {}
        for op, _, _ in self._nodes:
            counts[op] = counts.get(op, 0) + 1
        return counts


class Gradients:
    """Gradients accumulated per tensor, keyed by tensor identity."""

    def __init__(self):
        self._grads = {}
        self._tensors = {}

    def accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = grad
            self._tensors[key] = tensor

    def get(self, tensor: Tensor):
        """Accumulated gradient, or None if the tensor was never reached."""
        return self._grads.get(id(tensor))

    def wrt(self, tensor: Tensor) -> np.ndarray:
        """Accumulated gradient, zero-filled for untouched tensors."""
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def backward_multi(tape: Tape, seeds) -> Gradients:
    """Reverse-mode accumulation over the tape from several output seeds.

    ``seeds`` is an iterable of (tensor, gradient) pairs, one per output the
    scalar loss depends on. Gradients add when a value feeds multiple ops;
    traversal is in exact reverse execution order.
    """
    if len(tape) == 0:
        raise UsageError("backward before forward: tape is empty")
    grads = Gradients()
    seeded = False
    for tensor, grad in seeds:
        g = np.asarray(grad, dtype=tensor.data.dtype)
        if g.shape != tensor.data.shape:
            raise ShapeError(
                "backward",
                f"seed gradient shape {g.shape} does not match output shape {tensor.data.shape}",
            )
        grads.accumulate(tensor, g)
        seeded = True
    if not seeded:
        raise UsageError("backward: no seed gradients given")
    for _, output, backward_fn in reversed(tape._nodes):
        g = grads.get(output)
        if g is None:
            continue
        backward_fn(g, grads)
    return grads


def backward(tape: Tape, loss_grad, output: Tensor | None = None) -> Gradients:
    """Reverse pass seeded with d(scalar loss)/d(output).

    ``output`` defaults to the last tensor recorded on the tape.
    """
    out = output if output is not None else tape.last_output
    g = loss_grad.data if isinstance(loss_grad, Tensor) else np.asarray(loss_grad)
    return backward_multi(tape, [(out, g)])
