"""Run manifests: strict INI-style parsing, canonical serialization,
fingerprints, and the plan-file reader.

Syntax: ``[section]`` headers, ``key = value`` pairs, ``#``/``;`` comments,
blank lines. Parsing is strict on purpose: unknown sections or keys are
errors naming the offending line, so a typo like ``lr_warmup`` cannot
silently change an experiment. ``serialize_manifest`` emits a canonical form
(fixed section and key order, every default materialized); parse -> serialize
-> parse is a fixed point, and the 64-bit fingerprint of that canonical text
identifies the run everywhere artifacts need to be matched up.

Seeds for data synthesis and per-stage training are not stored per section;
they are derived from the single ``[run] seed`` when the manifest is
materialized, so overriding the seed on the command line re-seeds the whole
pipeline coherently.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace

from .errors import ManifestError
from .dataset import SYNTH_KINDS

_REQUIRED = object()
_NAME_RE = re.compile(r"linear|mlp\d+(?:-\d+)*")

MANIFEST_SECTIONS = (
    "run",
    "task",
    "stream",
    "schedule",
    "train.init",
    "train.pretrain",
    "train.finetune",
    "eval",
)

# the pretrain epoch taper applied when epochs = auto: first slices get the
# longest schedules, later (larger) slices the shortest
EPOCH_TAPER = (30, 20, 15)


def _parse_ini(text: str):
    """-> ordered {section: {key: (raw value, line number)}}; also returns
    the section header line numbers for error messages."""
    sections: dict = {}
    header_lines: dict = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ManifestError(f"line {lineno}: unterminated section header")
            current = stripped[1:-1].strip()
            if not current:
                raise ManifestError(f"line {lineno}: empty section name")
            if current in sections:
                raise ManifestError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = {}
            header_lines[current] = lineno
            continue
        if "=" not in stripped:
            raise ManifestError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if current is None:
            raise ManifestError(f"line {lineno}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ManifestError(f"line {lineno}: empty key")
        if key in sections[current]:
            raise ManifestError(f"line {lineno}: duplicate key '{key}' in [{current}]")
        sections[current][key] = (raw.strip(), lineno)
    return sections, header_lines


class _Section:
    """Typed key consumption with unknown-key rejection."""

    def __init__(self, name: str, entries: dict):
        self.name = name
        self.entries = dict(entries)

    def take(self, key: str, kind: str, default=_REQUIRED):
        if key not in self.entries:
            if default is _REQUIRED:
                raise ManifestError(f"missing required key '{key}' in [{self.name}]")
            return default
        raw, lineno = self.entries.pop(key)
        try:
            return _parse_value(raw, kind)
        except ValueError as exc:
            raise ManifestError(
                f"line {lineno}: key '{key}' in [{self.name}]: {exc}"
            ) from None

    def finish(self):
        for key, (_, lineno) in self.entries.items():
            raise ManifestError(f"line {lineno}: unknown key '{key}' in [{self.name}]")


def _parse_value(raw: str, kind: str):
    if kind == "str":
        return raw
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not v == v or v in (float("inf"), float("-inf")):
            raise ValueError("must be finite")
        return v
    if kind == "ints":
        if not raw:
            return ()
        return tuple(int(p.strip()) for p in raw.split(","))
    if kind == "strs":
        if not raw:
            return ()
        return tuple(p.strip() for p in raw.split(","))
    if kind == "epochs":  # auto | single int | comma list
        if raw == "auto":
            return None
        return tuple(int(p.strip()) for p in raw.split(","))
    if kind == "decays":  # auto | none | comma list
        if raw == "auto":
            return None
        if raw == "none":
            return ()
        return tuple(int(p.strip()) for p in raw.split(","))
    raise AssertionError(f"unknown kind {kind}")


def _fmt(value, kind: str) -> str:
    if kind in ("epochs", "decays") and value is None:
        return "auto"
    if kind == "decays" and value == ():
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class TaskSection:
    source: str = "synth"  # synth | file
    path: str = ""
    kind: str = "gaussian_mixture"
    classes: int = 20
    dim: int = 20
    samples: int = 4000
    separation: float = 4.0
    per_class: int = 10  # 0 = keep the whole labeled set


@dataclass(frozen=True)
class StreamSection:
    source: str = "synth"  # synth | files
    sizes: tuple = ()
    samples: int = 0  # synth pool rows; 0 = exactly sum(sizes)
    files: tuple = ()

    def slice_count(self) -> int:
        return len(self.files) if self.source == "files" else len(self.sizes)


@dataclass(frozen=True)
class ScheduleSection:
    preset: str = "default"
    specs: tuple = ()  # overrides the preset when non-empty

    def names(self) -> tuple:
        from .model import DEFAULT_SCHEDULE_NAMES

        if self.specs:
            return self.specs
        if self.preset == "default":
            return DEFAULT_SCHEDULE_NAMES
        raise ManifestError(f"unknown schedule preset {self.preset!r}")


@dataclass(frozen=True)
class TrainSection:
    epochs: tuple = None  # None = stage default / taper
    batch_size: int = 32
    lr: float = 0.1
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: tuple = None  # None = one decay at ceil(5/6 of the run)


@dataclass(frozen=True)
class EvalSection:
    source: str = "synth"  # synth | file
    path: str = ""
    samples: int = 2000


_TRAIN_DEFAULTS = {
    "train.init": TrainSection(epochs=(30,), batch_size=32),
    "train.pretrain": TrainSection(epochs=None, batch_size=64),
    "train.finetune": TrainSection(epochs=(15,), batch_size=32),
}


@dataclass(frozen=True)
class RunManifest:
    task: TaskSection
    stream: StreamSection
    schedule: ScheduleSection
    train_init: TrainSection
    train_pretrain: TrainSection
    train_finetune: TrainSection
    eval: EvalSection
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        names = self.schedule.names()
        for n in names:
            if not _NAME_RE.fullmatch(n):
                raise ManifestError(f"bad hypothesis name {n!r} in schedule")
        slices = self.stream.slice_count()
        if slices != len(names) - 1:
            raise ManifestError(
                f"length mismatch: stream defines {slices} slices but the "
                f"schedule has {len(names)} hypotheses (needs {len(names) - 1} slices)"
            )
        if self.task.source not in ("synth", "file"):
            raise ManifestError(f"task source must be synth or file, got {self.task.source!r}")
        if self.task.source == "file" and not self.task.path:
            raise ManifestError("task source=file needs a path")
        if self.task.source == "synth" and self.task.kind not in SYNTH_KINDS:
            raise ManifestError(f"task kind must be one of {SYNTH_KINDS}")
        if self.stream.source not in ("synth", "files"):
            raise ManifestError(f"stream source must be synth or files, got {self.stream.source!r}")
        if self.stream.source == "synth" and not self.stream.sizes:
            raise ManifestError("stream source=synth needs sizes")
        if self.stream.source == "files" and not self.stream.files:
            raise ManifestError("stream source=files needs files")
        if self.eval.source not in ("synth", "file"):
            raise ManifestError(f"eval source must be synth or file, got {self.eval.source!r}")
        if self.eval.source == "file" and not self.eval.path:
            raise ManifestError("eval source=file needs a path")
        t = self.stream.slice_count()
        ep = self.train_pretrain.epochs
        if ep is not None and len(ep) not in (1, t):
            raise ManifestError(
                f"train.pretrain epochs lists {len(ep)} values for {t} slices (need 1 or {t})"
            )
        for stage, tr in (("train.init", self.train_init), ("train.finetune", self.train_finetune)):
            if tr.epochs is not None and len(tr.epochs) != 1:
                raise ManifestError(f"{stage} epochs takes exactly one value")

    def pretrain_epochs(self) -> tuple:
        """Per-slice epoch counts; the auto default tapers 30/20/15 and holds
        at the last value for longer streams."""
        t = self.stream.slice_count()
        ep = self.train_pretrain.epochs
        if ep is None:
            return tuple(
                EPOCH_TAPER[i] if i < len(EPOCH_TAPER) else EPOCH_TAPER[-1] for i in range(t)
            )
        if len(ep) == 1:
            return ep * t
        return ep


def parse_manifest(text: str) -> RunManifest:
    sections, _ = _parse_ini(text)
    for name in sections:
        if name not in MANIFEST_SECTIONS:
            raise ManifestError(f"unknown section [{name}]")

    def section(name: str) -> _Section:
        return _Section(name, sections.get(name, {}))

    run = section("run")
    seed = run.take("seed", "int", 0)
    output_dir = run.take("output_dir", "str", "out")
    run.finish()

    s = section("task")
    task = TaskSection(
        source=s.take("source", "str", "synth"),
        path=s.take("path", "str", ""),
        kind=s.take("kind", "str", "gaussian_mixture"),
        classes=s.take("classes", "int", 20),
        dim=s.take("dim", "int", 20),
        samples=s.take("samples", "int", 4000),
        separation=s.take("separation", "float", 4.0),
        per_class=s.take("per_class", "int", 10),
    )
    s.finish()

    s = section("stream")
    stream = StreamSection(
        source=s.take("source", "str", "synth"),
        sizes=s.take("sizes", "ints", ()),
        samples=s.take("samples", "int", 0),
        files=s.take("files", "strs", ()),
    )
    s.finish()

    s = section("schedule")
    schedule = ScheduleSection(
        preset=s.take("preset", "str", "default"),
        specs=s.take("specs", "strs", ()),
    )
    s.finish()

    trains = {}
    for stage in ("train.init", "train.pretrain", "train.finetune"):
        s = section(stage)
        base = _TRAIN_DEFAULTS[stage]
        trains[stage] = TrainSection(
            epochs=s.take("epochs", "epochs", base.epochs),
            batch_size=s.take("batch_size", "int", base.batch_size),
            lr=s.take("lr", "float", base.lr),
            decay_factor=s.take("decay_factor", "float", base.decay_factor),
            momentum=s.take("momentum", "float", base.momentum),
            weight_decay=s.take("weight_decay", "float", base.weight_decay),
            decay_epochs=s.take("decay_epochs", "decays", base.decay_epochs),
        )
        s.finish()

    s = section("eval")
    ev = EvalSection(
        source=s.take("source", "str", "synth"),
        path=s.take("path", "str", ""),
        samples=s.take("samples", "int", 2000),
    )
    s.finish()

    return RunManifest(
        task=task,
        stream=stream,
        schedule=schedule,
        train_init=trains["train.init"],
        train_pretrain=trains["train.pretrain"],
        train_finetune=trains["train.finetune"],
        eval=ev,
        seed=seed,
        output_dir=output_dir,
    )


def serialize_manifest(m: RunManifest) -> str:
    out = []

    def emit(section: str, pairs):
        out.append(f"[{section}]")
        for key, value, kind in pairs:
            out.append(f"{key} = {_fmt(value, kind)}")
        out.append("")

    emit("run", [("seed", m.seed, "int"), ("output_dir", m.output_dir, "str")])
    emit(
        "task",
        [
            ("source", m.task.source, "str"),
            ("path", m.task.path, "str"),
            ("kind", m.task.kind, "str"),
            ("classes", m.task.classes, "int"),
            ("dim", m.task.dim, "int"),
            ("samples", m.task.samples, "int"),
            ("separation", m.task.separation, "float"),
            ("per_class", m.task.per_class, "int"),
        ],
    )
    emit(
        "stream",
        [
            ("source", m.stream.source, "str"),
            ("sizes", m.stream.sizes, "ints"),
            ("samples", m.stream.samples, "int"),
            ("files", m.stream.files, "strs"),
        ],
    )
    emit(
        "schedule",
        [("preset", m.schedule.preset, "str"), ("specs", m.schedule.specs, "strs")],
    )
    for stage, tr in (
        ("train.init", m.train_init),
        ("train.pretrain", m.train_pretrain),
        ("train.finetune", m.train_finetune),
    ):
        emit(
            stage,
            [
                ("epochs", tr.epochs, "epochs"),
                ("batch_size", tr.batch_size, "int"),
                ("lr", tr.lr, "float"),
                ("decay_factor", tr.decay_factor, "float"),
                ("momentum", tr.momentum, "float"),
                ("weight_decay", tr.weight_decay, "float"),
                ("decay_epochs", tr.decay_epochs, "decays"),
            ],
        )
    emit(
        "eval",
        [
            ("source", m.eval.source, "str"),
            ("path", m.eval.path, "str"),
            ("samples", m.eval.samples, "int"),
        ],
    )
    return "\n".join(out)


def manifest_fingerprint(m: RunManifest) -> int:
    h = hashlib.blake2b(serialize_manifest(m).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def load_manifest(path) -> RunManifest:
    with open(path) as fh:
        return parse_manifest(fh.read())


def with_seed(m: RunManifest, seed: int) -> RunManifest:
    return replace(m, seed=seed)


# ---------------------------------------------------------------------------
# plan files: [phase.N] sections, grouped into named plans by their plan key


def parse_plan_file(text: str) -> dict:
    """-> ordered {plan name: tuple of PhaseSpec}."""
    from .plan import PhaseSpec

    sections, header_lines = _parse_ini(text)
    plans: dict = {}
    for name, entries in sections.items():
        if not name.startswith("phase."):
            raise ManifestError(
                f"line {header_lines[name]}: unknown section [{name}] in plan file"
            )
        s = _Section(name, entries)
        plan_name = s.take("plan", "str", "main")
        phase = PhaseSpec(
            num_images=s.take("images", "int"),
            batch_size=s.take("batch_size", "int"),
            sec_per_batch=s.take("sec_per_batch", "float"),
            epochs=s.take("epochs", "int"),
            label=s.take("label", "str", name.removeprefix("phase.")),
        )
        s.finish()
        plans.setdefault(plan_name, []).append(phase)
    if not plans:
        raise ManifestError("plan file defines no [phase.N] sections")
    return {k: tuple(v) for k, v in plans.items()}
