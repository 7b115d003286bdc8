"""Influence-function standard errors for the restricted mean durations.

For a target subject with counterfactual covariates, each sample subject i
perturbs the two fitted survival curves through its score residual (via the
coefficient estimate) and through its martingale increments (via the
Breslow baseline). The ``xi`` arrays hold those perturbations on the
averaged scale, so that ``E_hat - E ~ n^{-1} sum_i int xi_i(t) dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cox import CountingProcessView, CoxFit, _aggregates
from .data import RestrictionWindow, SubjectRecord
from .prediction import (
    STATES,
    CounterfactualPolicy,
    RestrictedMeanEstimate,
    WindowEntryError,
    _counterfactual,
    _target_hazard,
)

__all__ = [
    "InfluenceDecomposition",
    "martingale_increments",
    "influence_decomposition",
    "xi_terms",
    "restricted_mean_se",
    "estimate_with_se",
]


def martingale_increments(view: CountingProcessView, fit: CoxFit):
    """dM_i(u) = dN_i(u) - Y_i(u) exp(b'x_i(u)) dLambda_0(u) at each jump time.

    Returns
    -------
    times : (K,) ndarray
    dM : (K, m) ndarray, columns follow ``view.subject_ids``
    """
    agg = _aggregates(view, fit.beta_hat)
    return view.times.copy(), view.dN - view.event_counts[:, None] * agg.pi


@dataclass(frozen=True, eq=False)
class InfluenceDecomposition:
    """Influence of each sample subject on one target's state curves.

    Arrays of shape ``(G, n)`` are indexed by merged grid point and sample
    subject (ordered as ``sample_ids``).
    """

    subject_id: str
    window: RestrictionWindow
    start: float
    grid: np.ndarray
    widths: np.ndarray
    sample_ids: tuple[str, ...]
    S_P: np.ndarray
    S_R: np.ndarray
    xi1_P: np.ndarray
    xi2_P: np.ndarray
    xi1_R: np.ndarray
    xi2_R: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def xi(self, state: str = "cap") -> np.ndarray:
        """Combined xi_i(t) for one state, shape ``(G, n)``."""
        dP = self.xi1_P + self.xi2_P
        dR = self.xi1_R + self.xi2_R
        sP, sR = self.S_P[:, None], self.S_R[:, None]
        if state == "cap":
            return sR * (-dP) + (1.0 - sP) * dR
        if state == "lt":
            return sR * dP + sP * dR
        if state == "rt":
            return -dR
        raise ValueError(f"unknown state {state!r}")

    def integrals(self, state: str = "cap") -> np.ndarray:
        """Window integral of xi_i for every sample subject, shape ``(n,)``."""
        return self.widths @ self.xi(state)


def _process_influence(fit, view, traj, entry, grid, end, sample_index, n):
    """xi1, xi2 for one process on ``grid``; also the target's survival there."""
    G = len(grid)
    h = _target_hazard(fit, traj, entry, end)
    S = np.exp(-np.concatenate(([0.0], np.cumsum(h.increments)))[
        np.searchsorted(h.times, grid, side="right")])
    xi1 = np.zeros((G, n))
    xi2 = np.zeros((G, n))
    if h.times.size == 0:
        return S, xi1, xi2

    agg = _aggregates(view, fit.beta_hat)
    xbar = agg.xbar[h.mask]
    pos = np.searchsorted(h.times, grid, side="right")

    # derivative of the target's cumulative hazard with respect to beta
    D = np.cumsum(h.increments[:, None] * (h.x - xbar), axis=0)
    D = np.vstack((np.zeros((1, D.shape[1])), D))[pos]
    # A^{-1} U_i with A = information / n
    infl_beta = n * (fit.score_residuals @ fit.hessian_inverse)   # (m, p)
    cols = sample_index
    xi1[:, cols] = -S[:, None] * (D @ infl_beta.T)

    # baseline part: risk * dM_i / S0, S0 the averaged risk-set sum
    dM = view.dN[h.mask] - view.event_counts[h.mask, None] * agg.pi[h.mask]
    s0 = np.exp(agg.log_s0[h.mask]) / n
    C = np.cumsum((h.risk / s0)[:, None] * dM, axis=0)
    C = np.vstack((np.zeros((1, C.shape[1])), C))[pos]
    xi2[:, cols] = -S[:, None] * C
    return S, xi1, xi2


def influence_decomposition(fitP: CoxFit, viewP: CountingProcessView,
                            fitR: CoxFit, viewR: CountingProcessView,
                            record: SubjectRecord, policy: CounterfactualPolicy | None,
                            window: RestrictionWindow,
                            sample_ids=None) -> InfluenceDecomposition:
    """Plug-in influence terms for ``record``'s counterfactual prediction.

    ``sample_ids`` defaults to the union of both views' subjects; a subject
    missing from one process contributes nothing to that process's terms.
    """
    if record.promotion is None:
        raise WindowEntryError(f"subject {record.id} has no promotion observation")
    p1 = record.promotion.entry
    if p1 >= window.tau1:
        raise WindowEntryError(f"subject {record.id} enters at {p1!r}, not before tau1={window.tau1!r}")
    if sample_ids is None:
        seen = dict.fromkeys(viewP.subject_ids)
        seen.update(dict.fromkeys(viewR.subject_ids))
        sample_ids = tuple(seen)
    sample_ids = tuple(sample_ids)
    n = len(sample_ids)
    pos = {sid: j for j, sid in enumerate(sample_ids)}
    idxP = np.array([pos[s] for s in viewP.subject_ids], dtype=int)
    idxR = np.array([pos[s] for s in viewR.subject_ids], dtype=int)

    cf = _counterfactual(record, policy, fitP, fitR)
    a = window.start_for(p1)
    end = window.tau1
    knots = fitP.event_times[(fitP.event_times > max(a, p1)) & (fitP.event_times < end)]
    r = cf.retirement
    has_r = r is not None and r.entry < end
    if has_r:
        kr = fitR.event_times[(fitR.event_times > max(a, r.entry)) & (fitR.event_times < end)]
        knots = np.concatenate((knots, kr))
    grid = np.unique(np.concatenate(([a], knots)))
    widths = np.diff(np.append(grid, end))

    S_P, xi1_P, xi2_P = _process_influence(fitP, viewP, cf.x_traj, p1, grid, end, idxP, n)
    if has_r:
        S_R, xi1_R, xi2_R = _process_influence(fitR, viewR, cf.z_traj, r.entry, grid, end, idxR, n)
    else:
        S_R = np.ones(len(grid))
        xi1_R = np.zeros((len(grid), n))
        xi2_R = np.zeros((len(grid), n))
    return InfluenceDecomposition(record.id, window, a, grid, widths, sample_ids,
                                  S_P, S_R, xi1_P, xi2_P, xi1_R, xi2_R)


def xi_terms(decomp: InfluenceDecomposition, sample_id: str) -> dict:
    """The per-subject row of ``decomp``: the four component functions, the
    combined xi for each state, and their window integrals."""
    j = decomp.sample_ids.index(sample_id)
    row = {
        "grid": decomp.grid,
        "xi1_P": decomp.xi1_P[:, j],
        "xi2_P": decomp.xi2_P[:, j],
        "xi1_R": decomp.xi1_R[:, j],
        "xi2_R": decomp.xi2_R[:, j],
    }
    for state in STATES:
        xi = decomp.xi(state)[:, j]
        row[f"xi_{state}"] = xi
        row[f"integral_{state}"] = float(decomp.widths @ xi)
    return row


def restricted_mean_se(integrals, n: int) -> float:
    """sqrt(n^{-1} * mean_i (int xi_i dt)^2)."""
    integrals = np.asarray(integrals, dtype=float)
    second_moment = math.fsum((integrals ** 2).tolist()) / n
    return math.sqrt(second_moment / n)


def estimate_with_se(fitP, viewP, fitR, viewR, record, policy, window, sample_ids=None):
    """Restricted means for all three states with their standard errors.

    Returns
    -------
    (tuple of RestrictedMeanEstimate, InfluenceDecomposition)
    """
    dec = influence_decomposition(fitP, viewP, fitR, viewR, record, policy, window, sample_ids)
    sP, sR = dec.S_P, dec.S_R
    probs = {"lt": sP * sR, "cap": (1.0 - sP) * sR, "rt": 1.0 - sR}
    out = []
    for state in STATES:
        value = float(dec.widths @ probs[state])
        se = restricted_mean_se(dec.integrals(state), dec.n)
        out.append(RestrictedMeanEstimate(state, value, se, window, record.id))
    return tuple(out), dec
