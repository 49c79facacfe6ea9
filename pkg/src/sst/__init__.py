"""Streaming self-training at desk scale.

Label a slice of an unlabeled stream with the current model, pretrain a
fresh higher-capacity model on those hard labels, fine-tune it on the small
labeled set, repeat. This package implements that loop end to end on
synthetic benchmarks, with bit-reproducible runs, an exact coordinate
descent verification mode, and the wall-clock/dollar planner for comparing
streamed against pooled pretraining schedules.
"""

from .backend import BACKEND, num_threads
from .dataset import (
    LabeledDataset,
    NormalizationStats,
    SynthSpec,
    UnlabeledSlice,
    apply_normalization,
    bayes_accuracy,
    few_shot_sample,
    fit_normalization,
    load_csv,
    load_dataset,
    make_stream,
    save_dataset,
    synthesize,
)
from .errors import (
    BadMagicError,
    CapacityError,
    DivergenceError,
    FingerprintMismatchError,
    FormatVersionError,
    LabelRangeError,
    LockError,
    ManifestError,
    ShapeError,
    SSTError,
    TruncatedFileError,
    ValidationError,
)
from .eval import EvalReport, evaluate, format_comparison_table, format_iteration_table
from .manifest import (
    RunManifest,
    load_manifest,
    manifest_fingerprint,
    parse_manifest,
    parse_plan_file,
    serialize_manifest,
    with_seed,
)
from .model import (
    CapacitySchedule,
    HypothesisSpec,
    Model,
    default_schedule,
    forward,
    init_model,
    model_fingerprint,
    predict,
    schedule_from_names,
    softmax,
)
from .optim import (
    MomentumState,
    TrainConfig,
    TrainTrace,
    cross_entropy,
    default_decay_epochs,
    finetune,
    grad_check,
    gradients,
    learn,
    mean_loss,
    sgd_step,
    sum_loss,
)
from .rng import Stream, derive
from .persist import (
    Checkpoint,
    load_checkpoint,
    load_label_cache,
    save_checkpoint,
    save_label_cache,
)
from .plan import (
    NO_STREAMING_PHASES,
    STREAMING_PHASES,
    PhaseSpec,
    PlanReport,
    phase_hours,
    plan_compare,
    plan_total,
    reference_comparison,
)
from .sst import (
    CDTrace,
    IterationRecord,
    PseudoLabeledDataset,
    RunReport,
    exact_cd_run,
    joint_objective,
    no_streaming_run,
    pseudo_label,
    stream_learning,
)

__version__ = "0.1.0"
