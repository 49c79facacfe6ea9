"""Wall-clock and dollar cost model for pretraining schedules.

A phase is (num_images, batch_size, sec_per_batch, epochs); its cost in
hours is ``num_images / batch_size * sec_per_batch * epochs / 3600`` with
real-valued batches per epoch. No ceiling on the batch count: that is the
rounding convention under which the reference schedules below land on
193.03 h and 486.98 h, and fine-tuning phases are deliberately absent from
the totals for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class PhaseSpec:
    num_images: int
    batch_size: int
    sec_per_batch: float
    epochs: int
    label: str = ""

    def __post_init__(self):
        if self.num_images <= 0 or self.batch_size <= 0 or self.sec_per_batch <= 0:
            raise ValidationError("num_images, batch_size, sec_per_batch must be > 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")


@dataclass(frozen=True)
class PlanReport:
    phase_hours: tuple
    total_hours: float
    total_dollars: float
    hours_saved: float = None
    dollars_saved: float = None
    percent_reduction: float = None

    @property
    def is_comparison(self) -> bool:
        return self.hours_saved is not None


def phase_hours(p: PhaseSpec) -> float:
    return p.num_images / p.batch_size * p.sec_per_batch * p.epochs / 3600.0


def plan_total(phases, rate_usd_per_hour: float) -> PlanReport:
    if rate_usd_per_hour < 0:
        raise ValidationError("rate must be >= 0")
    hours = tuple(phase_hours(p) for p in phases)
    total = sum(hours)
    return PlanReport(hours, total, total * rate_usd_per_hour)


def plan_compare(a, b, rate_usd_per_hour: float) -> PlanReport:
    """Cost of plan ``a`` with savings measured against the baseline ``b``."""
    ours = plan_total(a, rate_usd_per_hour)
    base = plan_total(b, rate_usd_per_hour)
    saved = base.total_hours - ours.total_hours
    reduction = 100.0 * saved / base.total_hours if base.total_hours else 0.0
    return PlanReport(
        ours.phase_hours,
        ours.total_hours,
        ours.total_dollars,
        hours_saved=saved,
        dollars_saved=saved * rate_usd_per_hour,
        percent_reduction=reduction,
    )


# the large-scale schedules whose costs motivated streaming in the first
# place: three tapered pretrains vs one monolithic pretrain over all data
STREAMING_PHASES = (
    PhaseSpec(1_000_000, 256, 0.39, 30, "slice1"),
    PhaseSpec(3_000_000, 256, 0.39, 20, "slice2"),
    PhaseSpec(7_000_000, 128, 0.68, 15, "slice3"),
)
NO_STREAMING_PHASES = (PhaseSpec(11_000_000, 128, 0.68, 30, "pooled"),)


def reference_comparison(rate_usd_per_hour: float = 5.0) -> PlanReport:
    return plan_compare(STREAMING_PHASES, NO_STREAMING_PHASES, rate_usd_per_hour)
