"""Counterfactual state probabilities and restricted mean durations.

All integrals are exact: the fitted survival curves are step functions, so
each restricted mean is a finite sum over the merged knot grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cox import CoxFit
from .data import CovariateTrajectory, RestrictionWindow, SubjectRecord

__all__ = [
    "CounterfactualPolicy",
    "SurvivalCurve",
    "RestrictedMeanEstimate",
    "WindowEntryError",
    "STATES",
    "apply_policy",
    "survival_curve",
    "restricted_means",
    "state_probability_curve",
    "step_integral",
]

STATES = ("lt", "cap", "rt")


class WindowEntryError(ValueError):
    pass


@dataclass(frozen=True)
class CounterfactualPolicy:
    """Replace one covariate (default: the protected indicator) by a fixed value."""

    target_column: str
    replacement_value: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "CounterfactualPolicy":
        """``"column=value"`` or just ``"column"`` (value 0)."""
        col, _, val = text.partition("=")
        return cls(col.strip(), float(val) if val.strip() else 0.0)


def _replace_in(traj, names, policy):
    if traj is None:
        return None
    try:
        j = list(names).index(policy.target_column)
    except ValueError:
        raise KeyError(f"policy column {policy.target_column!r} not among covariates {list(names)}") from None
    return traj.replace_column(j, policy.replacement_value)


def apply_policy(record: SubjectRecord, policy: CounterfactualPolicy,
                 promo_names: Sequence[str], retire_names: Sequence[str]) -> SubjectRecord:
    """Return ``record`` with the policy column overwritten in every segment
    of both trajectories."""
    for names in (promo_names, retire_names):
        if policy.target_column not in names:
            raise KeyError(f"policy column {policy.target_column!r} not among covariates {list(names)}")
    return replace(record,
                   x_traj=_replace_in(record.x_traj, promo_names, policy),
                   z_traj=_replace_in(record.z_traj, retire_names, policy))


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Right-continuous step function equal to 1 up to the first knot."""

    entry: float
    times: np.ndarray
    survival: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate(([1.0], self.survival))[idx]
        return vals if vals.ndim else float(vals)

    @classmethod
    def one(cls, entry=np.inf):
        return cls(entry, np.empty(0), np.empty(0))


@dataclass(frozen=True)
class _TargetHazard:
    """Per-knot pieces of one target's cumulative hazard under a fit."""

    mask: np.ndarray        # fit.event_times within (entry, horizon]
    times: np.ndarray       # masked knot times
    x: np.ndarray           # covariates at masked knots
    risk: np.ndarray        # exp(b'x) at masked knots
    increments: np.ndarray  # risk * baseline jump


def _target_hazard(fit: CoxFit, traj: CovariateTrajectory, entry: float, horizon: float) -> _TargetHazard:
    if traj.first_start > entry:
        raise ValueError(f"trajectory starts at {traj.first_start!r}, after entry {entry!r}")
    u = fit.event_times
    mask = (u > entry) & (u <= horizon)
    times = u[mask]
    x = traj.evaluate_many(times) if times.size else np.zeros((0, len(fit.beta_hat)))
    risk = np.exp(x @ fit.beta_hat) if times.size else np.zeros(0)
    return _TargetHazard(mask, times, x, risk, risk * fit.baseline_jumps[mask])


def survival_curve(fit: CoxFit, traj: CovariateTrajectory, entry: float, horizon: float) -> SurvivalCurve:
    """exp of minus the subject's cumulative hazard accumulated after ``entry``."""
    if entry > horizon:
        raise ValueError("entry must not exceed horizon")
    h = _target_hazard(fit, traj, entry, horizon)
    return SurvivalCurve(entry, h.times, np.exp(-np.cumsum(h.increments)))


@dataclass(frozen=True)
class RestrictedMeanEstimate:
    state: str
    value: float
    std_error: float
    window: RestrictionWindow
    subject_id: str

    @property
    def ci(self) -> tuple[float, float]:
        """95% Wald interval."""
        return self.value - 1.96 * self.std_error, self.value + 1.96 * self.std_error


def step_integral(grid: np.ndarray, values: np.ndarray, end: float) -> float:
    """Integral over ``[grid[0], end)`` of a step function holding
    ``values[j]`` on ``[grid[j], grid[j+1])``."""
    widths = np.diff(np.append(grid, end))
    return float(np.dot(values, widths))


@dataclass(frozen=True, eq=False)
class _StateCurves:
    start: float
    end: float
    grid: np.ndarray
    sP: np.ndarray
    sR: np.ndarray
    curveP: SurvivalCurve
    curveR: SurvivalCurve

    @property
    def widths(self) -> np.ndarray:
        return np.diff(np.append(self.grid, self.end))

    def probabilities(self):
        return self.sP * self.sR, (1.0 - self.sP) * self.sR, 1.0 - self.sR


def _counterfactual(record, policy, fitP, fitR):
    if policy is None:
        return record
    return apply_policy(record, policy, fitP.covariate_names, fitR.covariate_names)


def retirement_curve(fitR: CoxFit, record: SubjectRecord, end: float) -> SurvivalCurve:
    r = record.retirement
    if r is None or r.entry >= end:
        return SurvivalCurve.one()
    return survival_curve(fitR, record.z_traj, r.entry, end)


def _state_curves(fitP, fitR, record, policy, window) -> _StateCurves:
    if record.promotion is None:
        raise WindowEntryError(f"subject {record.id} has no promotion observation")
    p1 = record.promotion.entry
    if p1 >= window.tau1:
        raise WindowEntryError(f"subject {record.id} enters at {p1!r}, not before tau1={window.tau1!r}")
    cf = _counterfactual(record, policy, fitP, fitR)
    a = window.start_for(p1)
    curveP = survival_curve(fitP, cf.x_traj, p1, window.tau1)
    curveR = retirement_curve(fitR, cf, window.tau1)
    knots = np.concatenate((curveP.times, curveR.times))
    knots = knots[(knots > a) & (knots < window.tau1)]
    grid = np.unique(np.concatenate(([a], knots)))
    return _StateCurves(a, window.tau1, grid, curveP(grid), curveR(grid), curveP, curveR)


def restricted_means(fitP: CoxFit, fitR: CoxFit, record: SubjectRecord,
                     policy: CounterfactualPolicy | None, window: RestrictionWindow):
    """Expected time in the lower rank, higher rank and retirement over
    ``[max(tau0, entry), tau1)``.

    Returns
    -------
    tuple of RestrictedMeanEstimate
        ``(lt, cap, rt)`` with ``std_error`` set to NaN.
    """
    sc = _state_curves(fitP, fitR, record, policy, window)
    w = sc.widths
    p_lt, p_cap, p_rt = sc.probabilities()
    vals = (float(p_lt @ w), float(p_cap @ w), float(p_rt @ w))
    return tuple(RestrictedMeanEstimate(s, v, float("nan"), window, record.id)
                 for s, v in zip(STATES, vals))


def state_probability_curve(fitP: CoxFit, fitR: CoxFit, record: SubjectRecord,
                            policy: CounterfactualPolicy | None, window: RestrictionWindow):
    """Rows ``(time, p_lt, p_cap, p_rt)`` at the window start, every knot inside
    the window, and ``tau1``."""
    sc = _state_curves(fitP, fitR, record, policy, window)
    times = np.append(sc.grid, sc.end)
    sP = np.append(sc.sP, sc.curveP(sc.end))
    sR = np.append(sc.sR, sc.curveR(sc.end))
    return [(float(t), float(p * r), float((1.0 - p) * r), float(1.0 - r))
            for t, p, r in zip(times, sP, sR)]
