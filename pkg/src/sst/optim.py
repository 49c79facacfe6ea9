"""Cross-entropy training: loss, exact gradients, SGD with momentum.

One loop serves both entry points: ``learn`` starts from a fresh He init,
``finetune`` from existing parameters; everything else (shuffling, batching,
the step LR schedule, the update rule) is shared. The update is classical
coupled L2 decay with heavy-ball momentum::

    g <- grad + weight_decay * w ;  v <- momentum * v + g ;  w <- w - lr * v

The effective lr at (0-based) epoch e is
``initial_lr / decay_factor ** |{d in decay_epochs : d <= e}|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .backend import kernels
from .errors import DivergenceError, LabelRangeError, ShapeError, ValidationError
from .model import HypothesisSpec, Model, init_model

_TAG_INIT = 0x4C52_4E49
_TAG_SHUF = 0x4550_4F43


def default_decay_epochs(total_epochs: int) -> tuple:
    """One decay at ceil(5/6 of the run), so the last sixth trains at
    initial_lr / decay_factor. Empty when the run is too short to decay."""
    cut = -(-5 * total_epochs // 6)
    return (cut,) if 0 < cut < total_epochs else ()


@dataclass(frozen=True, kw_only=True)
class TrainConfig:
    total_epochs: int
    batch_size: int
    initial_lr: float = 0.1
    decay_factor: float = 10.0
    decay_epochs: tuple = None  # None -> default_decay_epochs(total_epochs)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.decay_epochs is None:
            object.__setattr__(self, "decay_epochs", default_decay_epochs(self.total_epochs))
        object.__setattr__(self, "decay_epochs", tuple(int(d) for d in self.decay_epochs))
        if self.total_epochs < 0:
            raise ValidationError("total_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise ValidationError("initial_lr must be > 0")
        if not self.decay_factor > 0:
            raise ValidationError("decay_factor must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        for i, d in enumerate(self.decay_epochs):
            if d < 0 or d >= self.total_epochs:
                raise ValidationError(f"decay epoch {d} outside [0, {self.total_epochs})")
            if i and d <= self.decay_epochs[i - 1]:
                raise ValidationError("decay_epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for d in self.decay_epochs if d <= epoch)
        return self.initial_lr / self.decay_factor**drops


@dataclass(frozen=True)
class TrainTrace:
    """Per-epoch mean training losses plus the loss of the final model."""

    epoch_losses: tuple
    final_loss: float
    epochs_run: int

    def __post_init__(self):
        object.__setattr__(self, "epoch_losses", tuple(float(v) for v in self.epoch_losses))
        if len(self.epoch_losses) != self.epochs_run:
            raise ValidationError(
                f"{len(self.epoch_losses)} epoch losses for epochs_run={self.epochs_run}"
            )
        if not all(np.isfinite(self.epoch_losses)) or not np.isfinite(self.final_loss):
            raise ValidationError("trace losses must be finite")


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.ascontiguousarray(labels, dtype=np.int32)
    if labels.ndim != 1:
        raise ShapeError("labels must be 1-d")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        row = int(bad[0])
        raise LabelRangeError(f"label {int(labels[row])} at row {row} outside [0, {num_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> tuple:
    """Mean of -log softmax(logits)[label] and its gradient wrt logits.

    Log-sum-exp stabilized; the gradient is (softmax - one_hot) / N.
    """
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-d")
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    loss_sum, grad = kernels.softmax_xent(logits, labels)
    n = logits.shape[0]
    grad /= n
    return loss_sum / n, grad


def _batch_inputs(model: Model, x, y) -> tuple:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"input shape {x.shape}, expected (*, {model.spec.input_dim})")
    y = _check_labels(y, model.spec.num_classes)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} rows")
    return x, y


def gradients(model: Model, x, y) -> tuple:
    """Backprop: per-layer (weight, bias) gradients of the mean cross-entropy."""
    x, y = _batch_inputs(model, x, y)
    logits, hidden = kernels.forward(x, model.weights, model.biases, keep_hidden=True)
    _, dlogits = kernels.softmax_xent(logits, y)
    dlogits /= x.shape[0]
    return kernels.backward(x, model.weights, hidden, dlogits)


def sum_loss(model: Model, x, y) -> float:
    """Summed (not mean) cross-entropy of a model over a dataset."""
    x, y = _batch_inputs(model, x, y)
    total = 0.0
    for start in range(0, x.shape[0], 8192):
        xb = np.ascontiguousarray(x[start : start + 8192])
        logits, _ = kernels.forward(xb, model.weights, model.biases, keep_hidden=False)
        s, _ = kernels.softmax_xent(logits, y[start : start + 8192])
        total += s
    return total


def mean_loss(model: Model, x, y) -> float:
    return sum_loss(model, x, y) / np.asarray(x).shape[0]


@dataclass
class MomentumState:
    """Velocity buffers, one per parameter tensor."""

    vel_w: list
    vel_b: list

    @staticmethod
    def zeros(model: Model) -> "MomentumState":
        return MomentumState(
            [np.zeros_like(w) for w in model.weights],
            [np.zeros_like(b) for b in model.biases],
        )


def sgd_step(model: Model, grads, state: MomentumState, config: TrainConfig, current_lr: float):
    """One functional update; returns (new model, new state)."""
    dws, dbs = grads
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    vw = [v.copy() for v in state.vel_w]
    vb = [v.copy() for v in state.vel_b]
    kernels.sgd_update(ws, bs, vw, vb, dws, dbs, current_lr, config.momentum, config.weight_decay)
    new_model = Model(model.spec, tuple(ws), tuple(bs), init_seed=model.init_seed)
    return new_model, MomentumState(vw, vb)


def _run_epochs(weights, biases, x, y, config: TrainConfig, master_seed: int) -> list:
    """In-place mini-batch SGD over writable parameter lists."""
    n = x.shape[0]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    losses = []
    for epoch in range(config.total_epochs):
        lr = config.lr_at(epoch)
        order = rng.Stream(rng.derive(master_seed, _TAG_SHUF, epoch)).permutation(n)
        epoch_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = np.ascontiguousarray(x[idx])
            yb = np.ascontiguousarray(y[idx])
            logits, hidden = kernels.forward(xb, weights, biases, keep_hidden=True)
            batch_sum, dlogits = kernels.softmax_xent(logits, yb)
            if not np.isfinite(batch_sum):
                raise DivergenceError(epoch, lr)
            epoch_sum += batch_sum
            dlogits /= idx.size
            dws, dbs = kernels.backward(xb, weights, hidden, dlogits)
            kernels.sgd_update(
                weights, biases, vel_w, vel_b, dws, dbs, lr, config.momentum, config.weight_decay
            )
        losses.append(epoch_sum / n)
    return losses


def _check_training_set(input_dim: int, num_classes: int, dataset) -> tuple:
    x = np.ascontiguousarray(dataset.features, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValidationError("training set is empty")
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"dataset dim {x.shape[1]} != model input_dim {input_dim}")
    y = _check_labels(dataset.labels, num_classes)
    return x, y


def learn(spec: HypothesisSpec, dataset, config: TrainConfig, seed=None):
    """Train ``spec`` from a fresh He init on any labeled container
    (``features``/``labels``/``num_classes``). Deterministic in (config, seed);
    when ``seed`` is omitted, ``config.seed`` takes its place."""
    x, y = _check_training_set(spec.input_dim, spec.num_classes, dataset)
    master = config.seed if seed is None else seed
    start = init_model(spec, rng.derive(master, _TAG_INIT))
    weights = [w.copy() for w in start.weights]
    biases = [b.copy() for b in start.biases]
    losses = _run_epochs(weights, biases, x, y, config, master)
    model = Model(spec, tuple(weights), tuple(biases), init_seed=start.init_seed)
    return model, TrainTrace(tuple(losses), mean_loss(model, x, y), config.total_epochs)


def finetune(model: Model, dataset, config: TrainConfig):
    """Same loop as ``learn`` but starting from ``model``'s parameters
    (every layer updates; nothing is frozen). Seeded by ``config.seed``."""
    x, y = _check_training_set(model.spec.input_dim, model.spec.num_classes, dataset)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    losses = _run_epochs(weights, biases, x, y, config, config.seed)
    tuned = Model(model.spec, tuple(weights), tuple(biases), init_seed=model.init_seed)
    return tuned, TrainTrace(tuple(losses), mean_loss(tuned, x, y), config.total_epochs)


def grad_check(model: Model, x, y, step: float = 1e-6) -> float:
    """Central finite differences against the analytic gradient.

    Returns max over parameters of |a - n| / max(1e-12, |a| + |n|). Runtime
    is two loss evaluations per parameter, so keep the model small.
    """
    x, y = _batch_inputs(model, x, y)
    dws, dbs = gradients(model, x, y)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]

    def loss_now() -> float:
        logits, _ = kernels.forward(x, weights, biases, keep_hidden=False)
        s, _ = kernels.softmax_xent(logits, y)
        return s / x.shape[0]

    worst = 0.0
    for analytic, params in ((dws, weights), (dbs, biases)):
        for grad, tensor in zip(analytic, params):
            flat_g = grad.ravel()
            flat_p = tensor.ravel()
            for i in range(flat_p.size):
                keep = flat_p[i]
                flat_p[i] = keep + step
                up = loss_now()
                flat_p[i] = keep - step
                down = loss_now()
                flat_p[i] = keep
                numeric = (up - down) / (2.0 * step)
                a = flat_g[i]
                err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
                if err > worst:
                    worst = err
    return worst
