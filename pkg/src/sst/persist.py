"""Binary artifacts: model checkpoints, pseudo-label caches, run locks.

Checkpoint (magic "SSTCKPT1", little-endian)::

    magic | u32 version=1 | u64 manifest_fingerprint | u32 t | u64 init_seed
    | u32 kind (0 linear, 1 mlp) | u32 input_dim | u32 num_classes
    | u32 n_hidden | n_hidden*u32 widths
    | u32 n_layers | per layer: u64 rows, u64 cols, rows*cols f64 W, cols f64 b

Pseudo-label cache (magic "SSTPLBL1")::

    magic | u32 version=1 | u64 M | M*i32 labels | u64 labeler_fingerprint

Parameters are stored as full 64-bit reals: resume must be bit-exact, and at
desk scale nobody cares about checkpoint size. Files are written to a
temporary sibling and renamed into place so a crash never leaves a torn
artifact behind.
"""

from __future__ import annotations

import contextlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatVersionError,
    LockError,
    TruncatedFileError,
    ValidationError,
)
from .model import HypothesisSpec, Model

CKPT_MAGIC = b"SSTCKPT1"
CACHE_MAGIC = b"SSTPLBL1"
CKPT_VERSION = 1
CACHE_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    version: int
    model: Model
    t: int
    manifest_fingerprint: int


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"{what}: expected {count} bytes, got {len(buf)}")
    return buf


def save_checkpoint(path, model: Model, t: int, manifest_fp: int = 0) -> None:
    spec = model.spec
    parts = [CKPT_MAGIC]
    parts.append(
        struct.pack(
            "<IQIQIIII",
            CKPT_VERSION,
            manifest_fp,
            t,
            model.init_seed,
            0 if spec.kind == "linear" else 1,
            spec.input_dim,
            spec.num_classes,
            len(spec.hidden),
        )
    )
    for h in spec.hidden:
        parts.append(struct.pack("<I", h))
    parts.append(struct.pack("<I", len(model.weights)))
    for w, b in zip(model.weights, model.biases):
        parts.append(struct.pack("<QQ", w.shape[0], w.shape[1]))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        version, manifest_fp, t, init_seed, kind, input_dim, num_classes, n_hidden = (
            struct.unpack("<IQIQIIII", _read_exact(fh, 40, "checkpoint header"))
        )
        if version != CKPT_VERSION:
            raise FormatVersionError(
                f"checkpoint format version {version}, expected {CKPT_VERSION}"
            )
        if kind not in (0, 1):
            raise ValidationError(f"checkpoint kind field {kind} not in (0, 1)")
        hidden = struct.unpack(
            f"<{n_hidden}I", _read_exact(fh, 4 * n_hidden, "hidden widths")
        )
        spec = HypothesisSpec(
            "linear" if kind == 0 else "mlp", input_dim, num_classes, hidden
        )
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
        if n_layers != len(spec.layer_dims()):
            raise ValidationError(
                f"checkpoint has {n_layers} layers, spec implies {len(spec.layer_dims())}"
            )
        weights, biases = [], []
        for l in range(n_layers):
            rows, cols = struct.unpack("<QQ", _read_exact(fh, 16, f"layer {l} shape"))
            w = np.frombuffer(
                _read_exact(fh, 8 * rows * cols, f"layer {l} weights"), dtype="<f8"
            ).reshape(rows, cols)
            b = np.frombuffer(_read_exact(fh, 8 * cols, f"layer {l} biases"), dtype="<f8")
            weights.append(w)
            biases.append(b)
        trailing = fh.read(1)
        if trailing:
            raise ValidationError("checkpoint has trailing bytes after the last layer")
    model = Model(spec, tuple(weights), tuple(biases), init_seed=init_seed)
    return Checkpoint(version, model, t, manifest_fp)


def save_label_cache(path, pseudo) -> None:
    """Persist one slice's pseudo-labels plus the fingerprint of the model
    that produced them (features live with the stream, not here)."""
    labels = np.ascontiguousarray(pseudo.pseudo_labels, dtype="<i4")
    payload = b"".join(
        [
            CACHE_MAGIC,
            struct.pack("<IQ", CACHE_VERSION, labels.size),
            labels.tobytes(),
            struct.pack("<Q", pseudo.labeler_fingerprint),
        ]
    )
    _atomic_write(path, payload)


def load_label_cache(path) -> tuple:
    """-> (labels int32 array, labeler fingerprint)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        version, m = struct.unpack("<IQ", _read_exact(fh, 12, "cache header"))
        if version != CACHE_VERSION:
            raise FormatVersionError(
                f"label cache format version {version}, expected {CACHE_VERSION}"
            )
        labels = np.frombuffer(_read_exact(fh, 4 * m, "cached labels"), dtype="<i4")
        (fp,) = struct.unpack("<Q", _read_exact(fh, 8, "labeler fingerprint"))
        if fh.read(1):
            raise ValidationError("label cache has trailing bytes")
    return labels, fp


@contextlib.contextmanager
def run_lock(output_dir):
    """Exclusive ownership of an output directory for the duration of a run.

    The lock file records the owning pid; a lock whose pid is gone is stale
    and silently reclaimed, a live one raises LockError.
    """
    lock_path = Path(output_dir) / "lock"
    if lock_path.exists():
        try:
            owner = int(lock_path.read_text().strip())
        except ValueError:
            owner = None
        alive = False
        if owner is not None:
            try:
                os.kill(owner, 0)
                alive = True
            except ProcessLookupError:
                alive = False
            except PermissionError:
                # exists but owned by someone else: definitely alive
                alive = True
        if alive and owner != os.getpid():
            raise LockError(
                f"output dir {output_dir} is owned by running pid {owner} "
                f"(remove {lock_path} if that is wrong)"
            )
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    lock_path.write_text(f"{os.getpid()}\n")
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock_path.unlink()
