"""NME loss, cross-format masked loss, AdamW, cosine schedule, training loop.

The per-sample loss is the mean per-point Euclidean error divided by the
ground truth's inter-ocular distance. Heads are masked at the gradient
level: a sample lacking a format contributes an exactly-zero gradient to
that head, and a head with no annotated sample in the batch is not run at
all. Each head's loss is normalized by its annotated-sample count so head
gradients stay scale-comparable when formats are unevenly represented.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import BatchStream
from .errors import ConfigError, NumericsError, UsageError
from .formats import FormatRegistry, LandmarkFormat, MIN_INTEROCULAR, default_registry
from .model import Model, model_forward
from .tensor import Tape, Tensor, backward_multi

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 512
    lr_max: float = 0.001
    lr_min: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.lr_min <= self.lr_max):
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")


class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, model: Model):
        self.m = {name: np.zeros_like(t.data) for name, t in model.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in model.params.items()}
        self.t = 0


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine decay from lr_max at t=0 to lr_min at t=total."""
    if total <= 0:
        raise UsageError(f"cosine_lr: total steps must be > 0, got {total}")
    if not (0 <= t <= total):
        raise UsageError(f"cosine_lr: step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place on the parameters."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        tensor.data -= (lr * (m_hat / (np.sqrt(v_hat) + config.eps)
                              + config.weight_decay * tensor.data)).astype(tensor.data.dtype)


def _nme_terms(pred: np.ndarray, gt: np.ndarray, fmt: LandmarkFormat):
    """Per-sample NME values, gradients w.r.t. pred, and a validity mask.

    Samples with a degenerate inter-ocular distance get weight 0 and a
    logged warning. The gradient at exact point coincidence is 0.
    """
    n = pred.shape[0]
    k = fmt.points
    p = pred.reshape(n, k, 2)
    g = gt.reshape(n, k, 2)
    left, right = fmt.interocular
    dio = np.linalg.norm(g[:, left] - g[:, right], axis=1)
    valid = dio >= MIN_INTEROCULAR
    if not np.all(valid):
        log.warning(
            "%s: excluding %d sample(s) with degenerate inter-ocular distance from the loss",
            fmt.name, int((~valid).sum()),
        )
    diff = p - g
    dist = np.sqrt((diff * diff).sum(axis=2))
    safe_dio = np.where(valid, dio, 1.0)
    nme = dist.mean(axis=1) / safe_dio
    nme = np.where(valid, nme, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0.0, diff / np.maximum(dist, 1e-300)[..., None], 0.0)
    dnme = unit / (k * safe_dio[:, None, None])
    dnme[~valid] = 0.0
    return nme, dnme.reshape(n, 2 * k), valid


def nme_loss(pred, gt, fmt: LandmarkFormat) -> float:
    """Batch-mean normalized mean error; invariant under similarity
    transforms applied jointly to predictions and ground truth."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
        g = g[None, :]
    if p.shape != g.shape or p.shape[1] != 2 * fmt.points:
        raise UsageError(
            f"nme_loss: shapes {p.shape} / {g.shape} do not match format "
            f"{fmt.name!r} with {fmt.points} points"
        )
    nme, _, valid = _nme_terms(p, g, fmt)
    if not valid.any():
        raise UsageError("nme_loss: every sample has a degenerate inter-ocular distance")
    return float(nme[valid].sum() / valid.sum())


def masked_multihead_loss(predictions: dict, batch, registry: FormatRegistry):
    """Total loss over the heads present in ``predictions``.

    Each head contributes the mean NME over the batch samples annotated in
    its format, or 0 when none are. Returns (total, per-head detail, seed
    gradients suitable for ``backward_multi``); gradient rows of unannotated
    samples are exactly zero.
    """
    total = 0.0
    detail = {}
    seeds = []
    for fmt_name, pred in predictions.items():
        fmt = registry.get(fmt_name)
        pd = pred.data
        rows = [i for i, sample in enumerate(batch) if sample.has(fmt_name)]
        if not rows:
            detail[fmt_name] = (0.0, 0)
            continue
        gt = np.stack([np.asarray(batch[i].annotations[fmt_name], dtype=pd.dtype) for i in rows])
        nme, dnme, valid = _nme_terms(pd[rows].astype(np.float64), gt.astype(np.float64), fmt)
        count = int(valid.sum())
        if count == 0:
            detail[fmt_name] = (0.0, 0)
            continue
        head_loss = float(nme.sum() / count)
        grad = np.zeros_like(pd)
        grad[rows] = (dnme / count).astype(pd.dtype)
        seeds.append((pred, grad))
        total += head_loss
        detail[fmt_name] = (head_loss, count)
    return total, detail, seeds


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_total: float
    head_loss: dict
    head_count: dict


class TrainLog:
    """Per-epoch learning rate, per-head mean loss, and contributing counts."""

    def __init__(self, formats):
        self.formats = tuple(formats)
        self.rows = []

    def append(self, row: EpochStats) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        header = ["epoch", "lr", "loss_total"]
        header += [f"loss_{f}" for f in self.formats]
        header += [f"n_{f}" for f in self.formats]
        lines = [",".join(header)]
        for row in self.rows:
            cells = [str(row.epoch), repr(row.lr), repr(row.loss_total)]
            cells += [repr(row.head_loss.get(f, 0.0)) for f in self.formats]
            cells += [str(row.head_count.get(f, 0)) for f in self.formats]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def train(model: Model, datasets, config: TrainConfig,
          registry: FormatRegistry | None = None) -> TrainLog:
    """Cross-format training loop; mutates the model in place.

    Per step: draw a merged-shuffle batch, forward every head with at least
    one annotated sample, compute the masked loss, backpropagate, and apply
    one AdamW step at the per-step cosine learning rate. Fully deterministic
    given (seed, config, data).
    """
    config.validate()
    registry = registry or default_registry()
    head_formats = model.head_formats()
    present = set()
    for ds in datasets:
        for sample in ds:
            present.update(sample.annotations)
    uncovered = present - set(head_formats)
    if uncovered:
        raise ConfigError(
            f"data contains formats with no head: {', '.join(sorted(uncovered))}"
        )
    if not present:
        raise ConfigError("training data has no annotated samples")
    stream = BatchStream(datasets, config.batch_size, config.seed)
    total_steps = config.epochs * stream.steps_per_epoch
    state = OptimizerState(model)
    train_log = TrainLog(head_formats)
    step = 0
    for epoch in range(config.epochs):
        epoch_lr = None
        step_totals = []
        loss_sums = {f: 0.0 for f in head_formats}
        count_sums = {f: 0 for f in head_formats}
        for batch in stream.batches(epoch):
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min)
            if epoch_lr is None:
                epoch_lr = lr
            formats = [f for f in head_formats if any(s.has(f) for s in batch)]
            if not formats:  # batch of calibration-only samples
                step += 1
                continue
            images = np.stack([s.image for s in batch]).astype(model.dtype)
            tape = Tape()
            predictions = model_forward(model, Tensor(images), formats, tape=tape)
            total, detail, seeds = masked_multihead_loss(predictions, batch, registry)
            if not math.isfinite(total):
                raise NumericsError(
                    f"loss became non-finite at epoch {epoch}, step {step}"
                )
            grads = backward_multi(tape, seeds)
            grad_map = {name: grads.wrt(t) for name, t in model.params.items()}
            adamw_step(model.params, grad_map, state, lr, config)
            step += 1
            step_totals.append(total)
            for fmt_name, (head_loss, count) in detail.items():
                loss_sums[fmt_name] += head_loss * count
                count_sums[fmt_name] += count
        train_log.append(
            EpochStats(
                epoch=epoch,
                lr=epoch_lr,
                loss_total=float(np.mean(step_totals)) if step_totals else 0.0,
                head_loss={
                    f: (loss_sums[f] / count_sums[f] if count_sums[f] else 0.0)
                    for f in head_formats
                },
                head_count=dict(count_sums),
            )
        )
    return train_log
