"""Streaming self-training: pseudo-labeling, the stream loop, and an exact
coordinate-descent verification mode.

The stream loop alternates three moves. Starting from a small model trained
on the labeled set S, iteration t pseudo-labels stream slice t with the
current model, pretrains a fresh (and usually larger) model from scratch on
those hard labels alone, then fine-tunes it on S. Slices are consumed
forward only: each is labeled exactly once, by the previous iteration's
fine-tuned model, and never revisited.

Both the z-step (hard labels) and the F-step are coordinate moves on the
joint objective sum_S loss + sum_U loss. The stream loop's F-step is SGD and
therefore approximate; ``exact_cd_run`` replaces it with a near-exact convex
solve on a linear model so the monotone-descent argument can be checked
numerically instead of taken on faith.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .backend import kernels, num_threads
from .dataset import LabeledDataset, UnlabeledSlice
from .errors import DivergenceError, ShapeError, ValidationError
from .eval import evaluate
from .model import (
    CapacitySchedule,
    HypothesisSpec,
    Model,
    model_fingerprint,
    predict,
)
from .optim import TrainConfig, finetune, learn, sum_loss

_LABEL_CHUNK = 4096  # fixed so results never depend on the worker count


@dataclass(frozen=True, eq=False)
class PseudoLabeledDataset:
    """Hard labels assigned to one stream slice by a frozen model."""

    features: np.ndarray
    pseudo_labels: np.ndarray
    num_classes: int
    source_slice_index: int
    labeler_fingerprint: int

    def __post_init__(self):
        if self.features.shape[0] != self.pseudo_labels.shape[0]:
            raise ShapeError("one pseudo-label per row required")
        lab = self.pseudo_labels
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValidationError("pseudo-labels outside [0, num_classes)")

    # lets the trainer consume this like any labeled dataset
    @property
    def labels(self) -> np.ndarray:
        return self.pseudo_labels

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class IterationRecord:
    t: int
    slice_size: int
    hypothesis: HypothesisSpec
    pretrain_final_loss: float
    top1: float
    wall_seconds: float

    def __post_init__(self):
        if self.t < 0:
            raise ValidationError("iteration index must be >= 0")
        if not 0.0 <= self.top1 <= 1.0:
            raise ValidationError(f"top1 {self.top1} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "slice_size": self.slice_size,
            "hypothesis": self.hypothesis.short_name(),
            "input_dim": self.hypothesis.input_dim,
            "num_classes": self.hypothesis.num_classes,
            "pretrain_final_loss": self.pretrain_final_loss,
            "top1": self.top1,
            "wall_seconds": self.wall_seconds,
        }

    @staticmethod
    def from_dict(d: dict) -> "IterationRecord":
        spec = HypothesisSpec.from_short_name(
            d["hypothesis"], d["input_dim"], d["num_classes"]
        )
        return IterationRecord(
            d["t"],
            d["slice_size"],
            spec,
            d["pretrain_final_loss"],
            d["top1"],
            d["wall_seconds"],
        )


@dataclass(frozen=True)
class RunReport:
    """One record per iteration, t = 0 (init) upward."""

    records: tuple
    manifest_fingerprint: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ValidationError("a report needs at least the t=0 record")
        for i, rec in enumerate(self.records):
            if rec.t != i:
                raise ValidationError(
                    f"record {i} has iteration index {rec.t}; indices must count up from 0"
                )

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]


def pseudo_label(model: Model, sl: UnlabeledSlice) -> PseudoLabeledDataset:
    """Hard argmax labels for every row; no thresholding, no filtering.

    Rows are labeled in fixed-size chunks; with SST_THREADS > 1 the chunks
    run on a thread pool, and because each chunk writes its own output range
    the result is identical for any worker count.
    """
    if sl.dim != model.spec.input_dim:
        raise ShapeError(
            f"slice dim {sl.dim} != model input_dim {model.spec.input_dim}"
        )
    n = sl.num_rows
    out = np.empty(n, dtype=np.int32)
    starts = range(0, n, _LABEL_CHUNK)

    def label_chunk(start: int) -> None:
        stop = min(start + _LABEL_CHUNK, n)
        out[start:stop] = predict(model, sl.features[start:stop])

    workers = num_threads()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(label_chunk, starts))
    else:
        for start in starts:
            label_chunk(start)
    return PseudoLabeledDataset(
        sl.features, out, model.spec.num_classes, sl.slice_index, model_fingerprint(model)
    )


def joint_objective(model: Model, labeled: LabeledDataset, pseudo=None) -> float:
    """Summed (not mean) cross-entropy over S plus the pseudo-labeled slice."""
    total = sum_loss(model, labeled.features, labeled.labels)
    if pseudo is not None and pseudo.num_rows:
        total += sum_loss(model, pseudo.features, pseudo.pseudo_labels)
    return total


def stream_learning(
    labeled: LabeledDataset,
    slices,
    schedule: CapacitySchedule,
    init_cfg: TrainConfig,
    pretrain_cfgs,
    finetune_cfg: TrainConfig,
    eval_set: LabeledDataset,
    *,
    collect_timing: bool = False,
    resume=None,
    on_iteration=None,
    manifest_fingerprint: int = 0,
    seed=None,
):
    """The stream loop; returns (final model, RunReport).

    ``pretrain_cfgs`` holds one TrainConfig per slice. All randomness comes
    from the configs' seeds, so iteration t depends only on (slice t, its
    config, finetune_cfg, the previous model): ``resume=(model, records)``
    restarts after ``records[-1].t`` and reproduces an uninterrupted run
    bit-exactly. ``wall_seconds`` entries are 0.0 unless ``collect_timing``
    is set, keeping reports byte-stable by default. ``on_iteration(record,
    model, pseudo)`` fires after every completed iteration.
    """
    slices = list(slices)
    pretrain_cfgs = list(pretrain_cfgs)
    t_total = len(schedule) - 1
    if len(slices) != t_total:
        raise ValidationError(
            f"{len(slices)} slices for a schedule of {len(schedule)} hypotheses "
            f"(need exactly {t_total})"
        )
    if len(pretrain_cfgs) != t_total:
        raise ValidationError(f"{len(pretrain_cfgs)} pretrain configs for {t_total} slices")
    for sl in slices:
        if sl.dim != labeled.dim:
            raise ShapeError(f"slice dim {sl.dim} != labeled dim {labeled.dim}")
    if seed is None:
        seed = init_cfg.seed

    records = []
    if resume is None:
        clock = time.perf_counter() if collect_timing else 0.0
        model, trace = learn(schedule[0], labeled, init_cfg)
        wall = time.perf_counter() - clock if collect_timing else 0.0
        rec = IterationRecord(
            0, 0, schedule[0], trace.final_loss, evaluate(model, eval_set).top1, wall
        )
        records.append(rec)
        if on_iteration is not None:
            on_iteration(rec, model, None)
    else:
        model, prior = resume
        records.extend(prior)
        if not records:
            raise ValidationError("resume needs the records completed so far")

    for t in range(records[-1].t + 1, t_total + 1):
        sl = slices[t - 1]
        clock = time.perf_counter() if collect_timing else 0.0
        pseudo = pseudo_label(model, sl)
        try:
            fresh, trace = learn(schedule[t], pseudo, pretrain_cfgs[t - 1])
            model, _ = finetune(fresh, labeled, finetune_cfg)
        except DivergenceError as exc:
            raise DivergenceError(exc.epoch, exc.lr, iteration=t) from exc
        wall = time.perf_counter() - clock if collect_timing else 0.0
        rec = IterationRecord(
            t, sl.num_rows, schedule[t], trace.final_loss,
            evaluate(model, eval_set).top1, wall,
        )
        records.append(rec)
        if on_iteration is not None:
            on_iteration(rec, model, pseudo)

    return model, RunReport(tuple(records), manifest_fingerprint, seed)


def no_streaming_run(
    labeled: LabeledDataset,
    slices,
    init_spec: HypothesisSpec,
    final_spec: HypothesisSpec,
    init_cfg: TrainConfig,
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    eval_set: LabeledDataset,
    *,
    collect_timing: bool = False,
    manifest_fingerprint: int = 0,
    seed=None,
):
    """Single-iteration baseline: pool every slice, pseudo-label the pool
    once with the init model, pretrain the final capacity on it, fine-tune.
    The report has exactly the t=0 and t=1 records with slice_size equal to
    the pooled row count, ready for side-by-side comparison tables."""
    slices = list(slices)
    if not slices:
        raise ValidationError("need at least one slice to pool")
    pool = UnlabeledSlice(
        np.concatenate([sl.features for sl in slices], axis=0), 1, "pooled"
    )
    if seed is None:
        seed = init_cfg.seed

    clock = time.perf_counter() if collect_timing else 0.0
    model0, trace0 = learn(init_spec, labeled, init_cfg)
    wall0 = time.perf_counter() - clock if collect_timing else 0.0
    rec0 = IterationRecord(
        0, 0, init_spec, trace0.final_loss, evaluate(model0, eval_set).top1, wall0
    )

    clock = time.perf_counter() if collect_timing else 0.0
    pseudo = pseudo_label(model0, pool)
    try:
        fresh, trace1 = learn(final_spec, pseudo, pretrain_cfg)
        model, _ = finetune(fresh, labeled, finetune_cfg)
    except DivergenceError as exc:
        raise DivergenceError(exc.epoch, exc.lr, iteration=1) from exc
    wall1 = time.perf_counter() - clock if collect_timing else 0.0
    rec1 = IterationRecord(
        1, pool.num_rows, final_spec, trace1.final_loss,
        evaluate(model, eval_set).top1, wall1,
    )
    return model, RunReport((rec0, rec1), manifest_fingerprint, seed)


# ---------------------------------------------------------------------------
# exact coordinate descent (verification mode)


@dataclass(frozen=True)
class CDTrace:
    """Objective after every half-step, plus label movement per iteration.

    ``objectives`` has two entries per iteration (post-z, post-F).
    ``label_changes[k]`` counts rows relabeled by z-step k relative to
    z-step k-1; entry 0 is 0 by definition (the first labeling has no
    predecessor).
    """

    objectives: tuple
    label_changes: tuple

    def fixed_point_iteration(self):
        """1-based index of the first z-step that moved no labels after the
        first; None if labels never settle within the trace."""
        for k, delta in enumerate(self.label_changes[1:], start=2):
            if delta == 0:
                return k
        return None


def _linear_pack(model: Model) -> np.ndarray:
    return np.concatenate([model.weights[0].ravel(), model.biases[0]])


def _linear_unpack(theta: np.ndarray, spec: HypothesisSpec) -> Model:
    d, c = spec.input_dim, spec.num_classes
    w = theta[: d * c].reshape(d, c)
    b = theta[d * c :]
    return Model(spec, (w,), (b,))


def _solve_linear(spec, x, y, theta0: np.ndarray) -> np.ndarray:
    """Near-exact minimizer of the summed CE of a linear softmax model.

    Convex, solved by L-BFGS-B from the warm start; the line search never
    accepts an increase, so the returned objective is <= the starting one.
    """
    d, c = spec.input_dim, spec.num_classes
    onehot = np.zeros((x.shape[0], c))
    onehot[np.arange(x.shape[0]), y] = 1.0

    def value_and_grad(theta):
        w = theta[: d * c].reshape(d, c)
        b = theta[d * c :]
        logits = x @ w + b
        shift = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shift).sum(axis=1))
        loss = float(np.sum(log_z - shift[np.arange(x.shape[0]), y]))
        p = np.exp(shift)
        p /= p.sum(axis=1, keepdims=True)
        delta = p - onehot
        return loss, np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])

    res = scipy.optimize.minimize(
        value_and_grad,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-10},
    )
    return res.x


def exact_cd_run(
    labeled: LabeledDataset,
    sl: UnlabeledSlice,
    spec: HypothesisSpec,
    iterations: int,
    cfg: TrainConfig,
) -> CDTrace:
    """Alternate exact z-steps and near-exact F-steps on the joint objective.

    The model must be linear so the F-step is a convex solve. ``cfg`` only
    shapes the starting model (trained on S alone); every later F-step
    minimizes the joint objective directly, warm-started from the previous
    parameters. The resulting objective trace is non-increasing up to solver
    tolerance, and on well-separated data the labels stop moving entirely.
    """
    if spec.kind != "linear":
        raise ValidationError("exact coordinate descent requires a linear hypothesis")
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    if sl.dim != spec.input_dim or labeled.dim != spec.input_dim:
        raise ShapeError("dims must match the hypothesis input_dim")

    model, _ = learn(spec, labeled, cfg)
    x_joint = np.concatenate([labeled.features, sl.features], axis=0)
    objectives, changes = [], []
    prev_labels = None
    for _ in range(iterations):
        pseudo = pseudo_label(model, sl)
        z = pseudo.pseudo_labels
        changes.append(0 if prev_labels is None else int(np.sum(z != prev_labels)))
        prev_labels = z
        objectives.append(joint_objective(model, labeled, pseudo))

        y_joint = np.concatenate([labeled.labels, z])
        theta = _solve_linear(spec, x_joint, y_joint, _linear_pack(model))
        candidate = _linear_unpack(theta, spec)
        solved = joint_objective(candidate, labeled, pseudo)
        # the solver cannot end above its warm start, but guard anyway
        if solved <= objectives[-1]:
            model = candidate
            objectives.append(solved)
        else:
            objectives.append(objectives[-1])
    return CDTrace(tuple(objectives), tuple(changes))
