import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmtenure.compensation import (
    CompensationSchedule,
    RateSegment,
    ScheduleError,
    constant_damages,
    expected_earnings_from_curve,
)

rate = st.floats(0, 1e4, allow_nan=False)


def test_equal_rates_reduce_to_window_length():
    s = CompensationSchedule.constant(7.0, 7.0, 7.0)
    means = (1.25, 2.5, 0.75)
    assert constant_damages(means, s, actual=3.0) == pytest.approx(7.0 * 4.5 - 3.0, abs=1e-12)


def test_zero_pension_no_promotion():
    s = CompensationSchedule.constant(100.0, 150.0, 0.0)
    assert constant_damages((4.0, 0.0, 1.0), s, actual=400.0) == 0.0


@pytest.mark.parametrize("bad", [
    dict(wage_lower=-1.0, wage_higher=1.0, pension=1.0),
    dict(wage_lower=1.0, wage_higher=math.inf, pension=1.0),
    dict(wage_lower=1.0, wage_higher=1.0, pension=math.nan),
])
def test_rates_must_be_finite_nonnegative(bad):
    with pytest.raises(ScheduleError):
        CompensationSchedule.constant(**bad)


def test_from_dict_forms():
    c = CompensationSchedule.from_dict({"wage_lower": 1, "wage_higher": 2, "pension": 0.5})
    assert c.is_constant and c.rates_at(-1e9) == (1.0, 2.0, 0.5)
    p = CompensationSchedule.from_dict({"segments": [
        {"start": "1996-01-01", "wage_lower": 1, "wage_higher": 2, "pension": 0.5},
        {"start": "2000-01-01", "wage_lower": 2, "wage_higher": 3, "pension": 1},
    ]})
    assert not p.is_constant and p.segments[0].start == 9496.0
    assert p.rates_at(10957.0) == (2.0, 3.0, 1.0)
    with pytest.raises(ScheduleError, match="pension"):
        CompensationSchedule.from_dict({"wage_lower": 1, "wage_higher": 2})
    with pytest.raises(ScheduleError, match="increasing"):
        CompensationSchedule((RateSegment(5, 1, 1, 1), RateSegment(5, 1, 1, 1)))


def _curve(rng, k, start, end):
    times = np.sort(np.concatenate([[start], rng.uniform(start, end, k)]))
    p = rng.dirichlet(np.ones(3), size=len(times))
    return times, p


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), rate, rate, rate)
def test_constant_piecewise_matches_means(seed, a, b, c):
    rng = np.random.default_rng(seed)
    times, p = _curve(rng, 8, 1.0, 9.0)
    widths = np.diff(np.append(times, 9.0))
    means = tuple(float(np.sum(widths * p[:, j])) for j in range(3))
    const = CompensationSchedule.constant(a, b, c)
    one_segment = CompensationSchedule((RateSegment(0.0, a, b, c),))
    direct = constant_damages(means, const)
    via_curve = expected_earnings_from_curve(times, p, 9.0, one_segment)
    assert via_curve == pytest.approx(direct, rel=1e-10, abs=1e-10)
    assert expected_earnings_from_curve(times, p, 9.0, const) == pytest.approx(direct, rel=1e-10,
                                                                               abs=1e-10)


def test_mid_window_rate_change_against_fine_grid():
    rng = np.random.default_rng(3)
    times, p = _curve(rng, 6, 0.0, 10.0)
    sched = CompensationSchedule((RateSegment(0.0, 1.0, 2.0, 0.5), RateSegment(4.3, 3.0, 5.0, 1.5),
                                  RateSegment(8.9, 2.0, 6.0, 2.5)))
    # midpoint rule on a grid aligned with every breakpoint is exact for step functions
    brk = np.union1d(times, [4.3, 8.9, 10.0])
    total = 0.0
    for lo, hi in zip(brk[:-1], brk[1:]):
        mid = 0.5 * (lo + hi)
        row = p[np.searchsorted(times, mid, side="right") - 1]
        total += (hi - lo) * float(np.dot(sched.rates_at(mid), row))
    assert expected_earnings_from_curve(times, p, 10.0, sched) == pytest.approx(total, rel=1e-13)


def test_time_scale_divides():
    times, p = np.array([0.0, 30.0]), np.array([[1.0, 0, 0], [0, 1.0, 0]])
    s = CompensationSchedule.constant(2.0, 3.0, 0.0)
    assert expected_earnings_from_curve(times, p, 60.0, s, time_scale=30.0) == pytest.approx(5.0)


def test_schedule_must_cover_window():
    times, p = np.array([0.0, 5.0]), np.full((2, 3), 1 / 3)
    late = CompensationSchedule((RateSegment(2.0, 1.0, 1.0, 1.0),))
    with pytest.raises(ScheduleError, match="after time"):
        expected_earnings_from_curve(times, p, 9.0, late)


def test_constant_damages_rejects_piecewise():
    with pytest.raises(ScheduleError):
        constant_damages((1, 1, 1), CompensationSchedule((RateSegment(0.0, 1, 1, 1),)))
