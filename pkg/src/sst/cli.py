"""Command-line surface and the reproducible-run harness.

``stream-run`` materializes a manifest into datasets, a schedule, and stage
configs, then drives the stream loop while persisting one checkpoint and one
pseudo-label cache per iteration plus an append-only ``records.jsonl``. A
rerun in the same output dir picks up at the last completed iteration and
reproduces the uninterrupted run bit for bit; artifacts from a different
manifest are refused by fingerprint. All derived randomness (data synthesis,
few-shot sampling, slicing, each training stage) comes from the manifest
seed, so ``--seed`` re-seeds the entire pipeline.

Commands: synth, train, pseudo-label, stream-run, no-stream-run, plan, eval,
grad-check. Expected failures print a single ``error: ...`` line and exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import rng
from .dataset import LabeledDataset, SynthSpec, UnlabeledSlice, load_dataset, save_dataset
from .errors import FingerprintMismatchError, SSTError, ValidationError
from .eval import evaluate, format_comparison_table, format_iteration_table
from .manifest import (
    RunManifest,
    load_manifest,
    manifest_fingerprint,
    serialize_manifest,
    with_seed,
)
from .model import CapacitySchedule, schedule_from_names
from .optim import TrainConfig, grad_check, learn
from .persist import (
    load_checkpoint,
    run_lock,
    save_checkpoint,
    save_label_cache,
)
from .plan import plan_compare, plan_total
from .sst import IterationRecord, no_streaming_run, pseudo_label, stream_learning

_TAG_TASK = 0x5441_534B
_TAG_FEW = 0x4645_5753
_TAG_POOL = 0x504F_4F4C
_TAG_STREAM = 0x5354_524D
_TAG_EVAL = 0x4556_414C
_TAG_TR_INIT = 0x5452_494E
_TAG_TR_PRE = 0x5452_5052
_TAG_TR_FT = 0x5452_4654


@dataclass(frozen=True)
class MaterializedRun:
    manifest: RunManifest
    fingerprint: int
    labeled: LabeledDataset
    slices: tuple
    schedule: CapacitySchedule
    init_cfg: TrainConfig
    pretrain_cfgs: tuple
    finetune_cfg: TrainConfig
    eval_set: LabeledDataset


def _train_config(section, total_epochs: int, seed: int) -> TrainConfig:
    return TrainConfig(
        total_epochs=total_epochs,
        batch_size=section.batch_size,
        initial_lr=section.lr,
        decay_factor=section.decay_factor,
        decay_epochs=section.decay_epochs,
        momentum=section.momentum,
        weight_decay=section.weight_decay,
        seed=seed,
    )


def materialize(m: RunManifest) -> MaterializedRun:
    """Turn a manifest into concrete datasets, slices, and configs."""
    seed = m.seed
    if m.task.source == "synth":
        full = ds_mod.synthesize(
            SynthSpec(
                m.task.kind, m.task.classes, m.task.dim, m.task.samples,
                m.task.separation, rng.derive(seed, _TAG_TASK),
            )
        )
    else:
        full = load_dataset(m.task.path)
        if not isinstance(full, LabeledDataset):
            raise ValidationError(f"task file {m.task.path} holds no labels")
    labeled = (
        ds_mod.few_shot_sample(full, m.task.per_class, rng.derive(seed, _TAG_FEW))
        if m.task.per_class > 0
        else full
    )

    if m.stream.source == "synth":
        pool_rows = m.stream.samples or sum(m.stream.sizes)
        pool = ds_mod.synthesize(
            SynthSpec(
                m.task.kind, m.task.classes, m.task.dim, pool_rows,
                m.task.separation, rng.derive(seed, _TAG_POOL),
            )
        )
        slices = ds_mod.make_stream(
            pool.features, m.stream.sizes, rng.derive(seed, _TAG_STREAM)
        )
    else:
        slices = []
        for t, path in enumerate(m.stream.files, start=1):
            loaded = load_dataset(path)
            slices.append(UnlabeledSlice(loaded.features, t, str(path)))

    if m.eval.source == "synth":
        eval_set = ds_mod.synthesize(
            SynthSpec(
                m.task.kind, m.task.classes, m.task.dim, m.eval.samples,
                m.task.separation, rng.derive(seed, _TAG_EVAL),
            )
        )
    else:
        eval_set = load_dataset(m.eval.path)
        if not isinstance(eval_set, LabeledDataset):
            raise ValidationError(f"eval file {m.eval.path} holds no labels")

    schedule = schedule_from_names(m.schedule.names(), labeled.dim, labeled.num_classes)
    init_epochs = m.train_init.epochs[0] if m.train_init.epochs else 30
    ft_epochs = m.train_finetune.epochs[0] if m.train_finetune.epochs else 15
    init_cfg = _train_config(m.train_init, init_epochs, rng.derive(seed, _TAG_TR_INIT))
    finetune_cfg = _train_config(m.train_finetune, ft_epochs, rng.derive(seed, _TAG_TR_FT))
    pretrain_cfgs = tuple(
        _train_config(m.train_pretrain, epochs, rng.derive(seed, _TAG_TR_PRE, t))
        for t, epochs in enumerate(m.pretrain_epochs(), start=1)
    )
    return MaterializedRun(
        m, manifest_fingerprint(m), labeled, tuple(slices), schedule,
        init_cfg, pretrain_cfgs, finetune_cfg, eval_set,
    )


# ---------------------------------------------------------------------------
# stream-run orchestration


class _StopRun(Exception):
    """Internal: a --stop-after bound was reached (not an error)."""


def _read_records(path: Path) -> list:
    records = []
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                records.append(IterationRecord.from_dict(json.loads(line)))
    return records


def _check_meta(out: Path, fingerprint: int, seed: int) -> None:
    meta_path = out / "run_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("fingerprint") != fingerprint:
            raise FingerprintMismatchError(
                f"{out} belongs to manifest fingerprint {meta.get('fingerprint')}, "
                f"this manifest is {fingerprint}"
            )
    else:
        for stale in ("records.jsonl", "report.csv"):
            (out / stale).unlink(missing_ok=True)
        meta_path.write_text(
            json.dumps({"fingerprint": fingerprint, "seed": seed}, sort_keys=True) + "\n"
        )


def run_stream(
    m: RunManifest,
    *,
    collect_timing: bool = False,
    stop_after=None,
    output_dir=None,
):
    """Drive stream_learning with per-iteration artifacts and auto-resume.

    Returns (model, report) on completion, (None, None) when stopped early
    by ``stop_after``.
    """
    mat = materialize(m)
    out = Path(output_dir if output_dir is not None else m.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with run_lock(out):
        _check_meta(out, mat.fingerprint, m.seed)
        (out / "manifest.cfg").write_text(serialize_manifest(m))
        records_path = out / "records.jsonl"
        prior = _read_records(records_path)

        resume = None
        if prior:
            last_t = prior[-1].t
            ckpt = load_checkpoint(out / f"checkpoint_t{last_t}.sstc")
            if ckpt.manifest_fingerprint != mat.fingerprint:
                raise FingerprintMismatchError(
                    f"checkpoint_t{last_t}.sstc carries fingerprint "
                    f"{ckpt.manifest_fingerprint}, manifest is {mat.fingerprint}"
                )
            if ckpt.t != last_t:
                raise ValidationError(
                    f"checkpoint_t{last_t}.sstc records iteration {ckpt.t}"
                )
            resume = (ckpt.model, prior)

        def on_iteration(rec, model, pseudo):
            save_checkpoint(out / f"checkpoint_t{rec.t}.sstc", model, rec.t, mat.fingerprint)
            if pseudo is not None:
                save_label_cache(out / f"pseudo_t{rec.t}.sstp", pseudo)
            with open(records_path, "a") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            if stop_after is not None and rec.t >= stop_after:
                raise _StopRun

        try:
            model, report = stream_learning(
                mat.labeled,
                mat.slices,
                mat.schedule,
                mat.init_cfg,
                mat.pretrain_cfgs,
                mat.finetune_cfg,
                mat.eval_set,
                collect_timing=collect_timing,
                resume=resume,
                on_iteration=on_iteration,
                manifest_fingerprint=mat.fingerprint,
                seed=m.seed,
            )
        except _StopRun:
            return None, None
        (out / "report.csv").write_text(format_iteration_table(report))
        return model, report


def run_no_stream(m: RunManifest, *, collect_timing: bool = False, output_dir=None):
    """The pooled single-iteration baseline under the same manifest seed."""
    mat = materialize(m)
    model, report = no_streaming_run(
        mat.labeled,
        mat.slices,
        mat.schedule[0],
        mat.schedule[len(mat.schedule) - 1],
        mat.init_cfg,
        mat.pretrain_cfgs[0],
        mat.finetune_cfg,
        mat.eval_set,
        collect_timing=collect_timing,
        manifest_fingerprint=mat.fingerprint,
        seed=m.seed,
    )
    out = Path(output_dir if output_dir is not None else m.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(format_iteration_table(report))
    save_checkpoint(out / "checkpoint_final.sstc", model, 1, mat.fingerprint)
    return model, report


# ---------------------------------------------------------------------------
# ablation harnesses: same manifest, same seed, varied one axis


def capacity_comparison(m: RunManifest, *, collect_timing: bool = False) -> str:
    """Growing-capacity stream vs the same stream stuck at the smallest
    hypothesis; returns the side-by-side CSV."""
    mat = materialize(m)
    _, growing = stream_learning(
        mat.labeled, mat.slices, mat.schedule, mat.init_cfg,
        mat.pretrain_cfgs, mat.finetune_cfg, mat.eval_set,
        collect_timing=collect_timing, manifest_fingerprint=mat.fingerprint, seed=m.seed,
    )
    fixed_schedule = CapacitySchedule((mat.schedule[0],) * len(mat.schedule))
    _, fixed = stream_learning(
        mat.labeled, mat.slices, fixed_schedule, mat.init_cfg,
        mat.pretrain_cfgs, mat.finetune_cfg, mat.eval_set,
        collect_timing=collect_timing, manifest_fingerprint=mat.fingerprint, seed=m.seed,
    )
    return format_comparison_table({"growing": growing, "fixed": fixed})


def streaming_comparison(m: RunManifest, *, collect_timing: bool = False) -> str:
    """Streamed iterations vs one pooled iteration; returns the CSV."""
    mat = materialize(m)
    _, streamed = stream_learning(
        mat.labeled, mat.slices, mat.schedule, mat.init_cfg,
        mat.pretrain_cfgs, mat.finetune_cfg, mat.eval_set,
        collect_timing=collect_timing, manifest_fingerprint=mat.fingerprint, seed=m.seed,
    )
    _, pooled = no_streaming_run(
        mat.labeled, mat.slices, mat.schedule[0], mat.schedule[len(mat.schedule) - 1],
        mat.init_cfg, mat.pretrain_cfgs[0], mat.finetune_cfg, mat.eval_set,
        collect_timing=collect_timing, manifest_fingerprint=mat.fingerprint, seed=m.seed,
    )
    return format_comparison_table({"streaming": streamed, "no_streaming": pooled})


# ---------------------------------------------------------------------------
# subcommands


def _load_manifest_arg(args) -> RunManifest:
    m = load_manifest(args.manifest)
    if args.seed is not None:
        m = with_seed(m, args.seed)
    return m


def cmd_synth(args) -> int:
    spec = SynthSpec(
        args.kind, args.classes, args.dim, args.samples, args.separation, args.seed or 0
    )
    full = ds_mod.synthesize(spec)
    if args.unlabeled:
        save_dataset(args.output, UnlabeledSlice(full.features, 1, full.name))
    else:
        save_dataset(args.output, full)
    print(f"wrote {args.output}: {full.num_rows} rows, dim {full.dim}, "
          f"{'unlabeled' if args.unlabeled else f'{full.num_classes} classes'}")
    return 0


def cmd_train(args) -> int:
    m = _load_manifest_arg(args)
    mat = materialize(m)
    model, trace = learn(mat.schedule[0], mat.labeled, mat.init_cfg)
    top1 = evaluate(model, mat.eval_set).top1
    save_checkpoint(args.output, model, 0, mat.fingerprint)
    print(f"trained {mat.schedule[0].short_name()} on {mat.labeled.num_rows} rows: "
          f"final loss {trace.final_loss:.4f}, test top1 {100 * top1:.2f}")
    print(f"wrote {args.output}")
    return 0


def cmd_pseudo_label(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    loaded = load_dataset(args.file)
    sl = UnlabeledSlice(loaded.features, 1, str(args.file))
    pseudo = pseudo_label(ckpt.model, sl)
    save_label_cache(args.output, pseudo)
    counts = np.bincount(pseudo.pseudo_labels, minlength=ckpt.model.spec.num_classes)
    print(f"labeled {pseudo.num_rows} rows with {ckpt.model.spec.short_name()} "
          f"(fingerprint {pseudo.labeler_fingerprint:016x})")
    print(f"class counts: {','.join(str(int(c)) for c in counts)}")
    print(f"wrote {args.output}")
    return 0


def cmd_stream_run(args) -> int:
    m = _load_manifest_arg(args)
    model, report = run_stream(
        m,
        collect_timing=args.timing,
        stop_after=args.stop_after,
        output_dir=args.output,
    )
    out = args.output if args.output is not None else m.output_dir
    if report is None:
        print(f"stopped after iteration {args.stop_after}; rerun to resume ({out})")
        return 0
    sys.stdout.write(format_iteration_table(report))
    print(f"artifacts in {out}")
    return 0


def cmd_no_stream_run(args) -> int:
    m = _load_manifest_arg(args)
    _, report = run_no_stream(m, collect_timing=args.timing, output_dir=args.output)
    sys.stdout.write(format_iteration_table(report))
    out = args.output if args.output is not None else m.output_dir
    print(f"artifacts in {out}")
    return 0


def cmd_compare(args) -> int:
    m = _load_manifest_arg(args)
    fn = capacity_comparison if args.mode == "capacity" else streaming_comparison
    table = fn(m, collect_timing=args.timing)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(table)
        print(f"wrote {args.output}")
    else:
        sys.stdout.write(table)
    return 0


def cmd_plan(args) -> int:
    from .manifest import parse_plan_file

    with open(args.file) as fh:
        plans = parse_plan_file(fh.read())
    rate = args.rate_usd
    for name, phases in plans.items():
        rep = plan_total(phases, rate)
        detail = " + ".join(f"{h:.2f}" for h in rep.phase_hours)
        print(f"plan {name}: {detail} = {rep.total_hours:.2f} h (${rep.total_dollars:.2f})")
    if len(plans) == 2:
        (name_a, a), (name_b, b) = plans.items()
        rep = plan_compare(a, b, rate)
        print(
            f"{name_a} saves {rep.hours_saved:.2f} h and ${rep.dollars_saved:.2f} "
            f"vs {name_b} ({rep.percent_reduction:.1f}% reduction)"
        )
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    test = load_dataset(args.test)
    if not isinstance(test, LabeledDataset):
        raise ValidationError(f"test file {args.test} holds no labels")
    rep = evaluate(ckpt.model, test)
    hits = int(round(rep.top1 * rep.n_examples))
    print(f"top1 = {100 * rep.top1:.2f} ({hits}/{rep.n_examples})")
    print("per_class = " + ",".join(f"{100 * a:.2f}" for a in rep.per_class_acc))
    if rep.missing_classes:
        print(f"warning: no test rows for classes {list(rep.missing_classes)}")
    return 0


def cmd_grad_check(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    spec = ckpt.model.spec
    if args.file:
        data = load_dataset(args.file)
        if not isinstance(data, LabeledDataset):
            raise ValidationError(f"{args.file} holds no labels")
        x, y = data.features[: args.rows], data.labels[: args.rows]
    else:
        stream = rng.Stream(rng.derive(args.seed or 0, 0x4743_4B31))
        x = stream.normal(args.rows * spec.input_dim).reshape(args.rows, spec.input_dim)
        y = (stream.u64(args.rows) % np.uint64(spec.num_classes)).astype(np.int32)
    err = grad_check(ckpt.model, x, y, step=args.step)
    print(f"max relative gradient error over {spec.parameter_count()} parameters: {err:.3e}")
    return 0 if err <= 1e-5 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sst", description="streaming self-training experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--kind", default="gaussian_mixture", choices=ds_mod.SYNTH_KINDS)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled", action="store_true", help="drop labels (stream slice file)")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the init model of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    p.add_argument("--output", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label", help="label an unlabeled file with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--file", required=True, help="unlabeled dataset file")
    p.add_argument("--output", required=True, help="label cache path")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("stream-run", help="run the full stream loop with artifacts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    p.add_argument("--output", default=None, help="override the manifest output_dir")
    p.add_argument("--timing", action="store_true", help="record measured wall_seconds")
    p.add_argument("--stop-after", type=int, default=None,
                   help="stop after this iteration completes (for resume testing)")
    p.set_defaults(func=cmd_stream_run)

    p = sub.add_parser("no-stream-run", help="pooled single-iteration baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=cmd_no_stream_run)

    p = sub.add_parser(
        "compare", help="paired runs, one CSV: growing-vs-fixed or stream-vs-pooled"
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("capacity", "streaming"), required=True)
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    p.add_argument("--timing", action="store_true", help="record measured wall_seconds")
    p.add_argument("--output", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plan", help="wall-clock and dollar cost of training plans")
    p.add_argument("--file", required=True, help="plan file with [phase.N] sections")
    p.add_argument("--rate-usd", type=float, default=5.0, help="USD per hour")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of a checkpoint's gradients")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--file", default=None, help="labeled data to check on (default: random)")
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SSTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
