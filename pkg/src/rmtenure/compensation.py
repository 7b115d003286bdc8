"""Lost-earnings arithmetic on top of restricted means and state curves."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import parse_time

__all__ = ["RateSegment", "CompensationSchedule", "ScheduleError", "constant_damages",
           "expected_earnings_from_curve"]

DAYS_PER_MONTH = 30.4375


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class RateSegment:
    start: float
    wage_lower: float
    wage_higher: float
    pension: float

    @property
    def rates(self) -> tuple[float, float, float]:
        return (self.wage_lower, self.wage_higher, self.pension)


@dataclass(frozen=True)
class CompensationSchedule:
    """Pay rates for the lower rank, the higher rank and retirement.

    A schedule with a single segment starting at ``-inf`` is constant.
    Segment ``k`` applies on ``[start_k, start_{k+1})``; the last extends
    indefinitely.
    """

    segments: tuple[RateSegment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ScheduleError("schedule has no segments")
        for seg in self.segments:
            for name, r in zip(("wage_lower", "wage_higher", "pension"), seg.rates):
                if not (math.isfinite(r) and r >= 0):
                    raise ScheduleError(f"{name} must be a finite non-negative rate, got {r!r}")
        starts = [s.start for s in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScheduleError("segment starts must be strictly increasing")

    @classmethod
    def constant(cls, wage_lower, wage_higher, pension):
        return cls((RateSegment(-math.inf, float(wage_lower), float(wage_higher), float(pension)),))

    @property
    def is_constant(self) -> bool:
        return len(self.segments) == 1 and self.segments[0].start == -math.inf

    @classmethod
    def from_dict(cls, raw: dict) -> "CompensationSchedule":
        if "segments" not in raw:
            try:
                return cls.constant(raw["wage_lower"], raw["wage_higher"], raw["pension"])
            except KeyError as exc:
                raise ScheduleError(f"schedule is missing {exc.args[0]!r}") from None
        epoch = raw.get("epoch", "1970-01-01")
        segs = []
        for i, s in enumerate(raw["segments"]):
            try:
                segs.append(RateSegment(parse_time(str(s["start"]), epoch), float(s["wage_lower"]),
                                        float(s["wage_higher"]), float(s["pension"])))
            except KeyError as exc:
                raise ScheduleError(f"segment {i} is missing {exc.args[0]!r}") from None
        return cls(tuple(segs))

    def rates_at(self, t: float) -> tuple[float, float, float]:
        starts = [s.start for s in self.segments]
        k = int(np.searchsorted(starts, t, side="right")) - 1
        if k < 0:
            raise ScheduleError(f"schedule starts at {starts[0]!r}, after time {t!r}")
        return self.segments[k].rates


def constant_damages(means: tuple[float, float, float], schedule: CompensationSchedule,
                     actual: float = 0.0) -> float:
    """``w_lower*lt + w_higher*cap + pension*rt - actual`` for a constant schedule."""
    if not schedule.is_constant:
        raise ScheduleError("constant damages need a constant schedule")
    rates = schedule.segments[0].rates
    return math.fsum(r * m for r, m in zip(rates, means)) - actual


def expected_earnings_from_curve(times, probs, end: float, schedule: CompensationSchedule,
                                 time_scale: float = 1.0) -> float:
    """Exact integral of rate-weighted state probabilities over ``[times[0], end)``.

    ``probs`` is a ``(len(times), 3)`` array of right-continuous state
    probabilities (lower rank, higher rank, retired). Rate changes inside the
    window are merged into the grid. The result is divided by ``time_scale``
    so that rates quoted per month can be used with a daily time axis.
    """
    times = np.asarray(times, dtype=float)
    probs = np.asarray(probs, dtype=float)
    start = times[0]
    schedule.rates_at(start)
    cuts = [s.start for s in schedule.segments if start < s.start < end]
    grid = np.union1d(times[times < end], cuts)
    widths = np.diff(np.append(grid, end))
    rows = np.searchsorted(times, grid, side="right") - 1
    terms = []
    for g, w, r in zip(grid, widths, rows):
        rates = schedule.rates_at(g)
        terms.extend(w * rate * p for rate, p in zip(rates, probs[r]))
    return math.fsum(terms) / time_scale
