"""Hypothesis classes (linear softmax, ReLU MLPs), capacity schedules, init.

A model is a stack of affine layers with ReLU between hidden layers and
identity at the output; ``weights[l]`` has shape (fan_in, fan_out) so the
forward pass is ``x @ W + b`` throughout.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .backend import kernels
from .errors import CapacityError, ShapeError, ValidationError

MODEL_KINDS = ("linear", "mlp")
_INIT_TAG = 0x494E_4954


@dataclass(frozen=True)
class HypothesisSpec:
    """Architecture only; holds no parameters."""

    kind: str
    input_dim: int
    num_classes: int
    hidden: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValidationError("need input_dim >= 1 and num_classes >= 2")
        if self.kind == "linear" and self.hidden:
            raise ValidationError("linear hypotheses take no hidden widths")
        if self.kind == "mlp" and not self.hidden:
            raise ValidationError("mlp hypotheses need at least one hidden width")
        if any(h < 1 for h in self.hidden):
            raise ValidationError("hidden widths must be >= 1")

    def layer_dims(self) -> list:
        """[(fan_in, fan_out)] for every affine layer, input to output."""
        widths = [self.input_dim, *self.hidden, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    def parameter_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims())

    def short_name(self) -> str:
        if self.kind == "linear":
            return "linear"
        return "mlp" + "-".join(str(h) for h in self.hidden)

    @staticmethod
    def from_short_name(name: str, input_dim: int, num_classes: int) -> "HypothesisSpec":
        if name == "linear":
            return HypothesisSpec("linear", input_dim, num_classes)
        m = re.fullmatch(r"mlp(\d+(?:-\d+)*)", name)
        if not m:
            raise ValidationError(f"unrecognized hypothesis name {name!r}")
        hidden = tuple(int(h) for h in m.group(1).split("-"))
        return HypothesisSpec("mlp", input_dim, num_classes, hidden)


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable parameter snapshot of a hypothesis."""

    spec: HypothesisSpec
    weights: tuple
    biases: tuple
    init_seed: int = 0

    def __post_init__(self):
        ws = tuple(_freeze(w) for w in self.weights)
        bs = tuple(_freeze(b) for b in self.biases)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        dims = self.spec.layer_dims()
        if len(ws) != len(dims) or len(bs) != len(dims):
            raise ShapeError(f"expected {len(dims)} layers, got {len(ws)}/{len(bs)}")
        for l, (fi, fo) in enumerate(dims):
            if ws[l].shape != (fi, fo):
                raise ShapeError(f"layer {l} weight shape {ws[l].shape}, expected ({fi}, {fo})")
            if bs[l].shape != (fo,):
                raise ShapeError(f"layer {l} bias shape {bs[l].shape}, expected ({fo},)")

    def parameter_count(self) -> int:
        return self.spec.parameter_count()


def _freeze(arr) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


def init_model(spec: HypothesisSpec, seed: int) -> Model:
    """He initialization: W ~ N(0, 2/fan_in), biases zero.

    Each layer draws from its own counter stream (derived from ``seed`` and
    the layer index), so adding layers never shifts earlier layers' draws.
    """
    weights, biases = [], []
    for l, (fi, fo) in enumerate(spec.layer_dims()):
        stream = rng.Stream(rng.derive(seed, _INIT_TAG, l))
        w = stream.normal(fi * fo).reshape(fi, fo) * np.sqrt(2.0 / fi)
        weights.append(w)
        biases.append(np.zeros(fo))
    return Model(spec, tuple(weights), tuple(biases), init_seed=seed)


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a batch; raises ShapeError on a feature-width mismatch."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(
            f"input shape {x.shape}, expected (*, {model.spec.input_dim})"
        )
    logits, _ = kernels.forward(x, model.weights, model.biases, keep_hidden=False)
    return logits


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Argmax labels (ties go to the lowest class index)."""
    return np.argmax(forward(model, x), axis=1).astype(np.int32)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def model_fingerprint(model: Model) -> int:
    """64-bit blake2b over the parameter bytes, layer by layer (W then b)."""
    h = hashlib.blake2b(digest_size=8)
    for w, b in zip(model.weights, model.biases):
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class CapacitySchedule:
    """Hypothesis sequence for the stream iterations; capacity never drops.

    Entry 0 trains on the labeled set alone; entry t (1-based) pretrains on
    stream slice t.
    """

    specs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if not self.specs:
            raise ValidationError("schedule needs at least one hypothesis")
        first = self.specs[0]
        for s in self.specs[1:]:
            if (s.input_dim, s.num_classes) != (first.input_dim, first.num_classes):
                raise ValidationError("all schedule entries must share input_dim/num_classes")
        counts = [s.parameter_count() for s in self.specs]
        for t in range(1, len(counts)):
            if counts[t] < counts[t - 1]:
                raise CapacityError(
                    f"parameter count drops at step {t}: "
                    f"{counts[t - 1]} -> {counts[t]} ({self.specs[t].short_name()})"
                )

    def __len__(self) -> int:
        return len(self.specs)

    def __getitem__(self, t: int) -> HypothesisSpec:
        return self.specs[t]

    @property
    def num_iterations(self) -> int:
        """Stream iterations (schedule length minus the initial model)."""
        return len(self.specs) - 1

    def short_names(self) -> list:
        return [s.short_name() for s in self.specs]


DEFAULT_SCHEDULE_NAMES = ("linear", "mlp32", "mlp128", "mlp256-128")


def default_schedule(input_dim: int, num_classes: int) -> CapacitySchedule:
    return schedule_from_names(DEFAULT_SCHEDULE_NAMES, input_dim, num_classes)


def schedule_from_names(names, input_dim: int, num_classes: int) -> CapacitySchedule:
    return CapacitySchedule(
        tuple(HypothesisSpec.from_short_name(n, input_dim, num_classes) for n in names)
    )
