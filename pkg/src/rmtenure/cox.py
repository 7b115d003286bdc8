"""Proportional hazards fitting on a calendar time axis.

Supports delayed entry and step-function time-varying covariates. Tied
event times use the Breslow approximation throughout, so the partial
likelihood, its derivatives and the baseline hazard share one risk-set
denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import Dataset

__all__ = [
    "CountingProcessView",
    "CoxFit",
    "CoxError",
    "NonConvergence",
    "MonotoneLikelihood",
    "SingularHessian",
    "build_view",
    "log_partial_likelihood",
    "score_and_hessian",
    "breslow_baseline",
    "fit",
    "fit_view",
]

SCORE_TOL = 1e-8
MAX_ITER = 50
MAX_HALVINGS = 10
DIVERGENCE_BOUND = 50.0
STEP_TOL = 1e-6


class CoxError(RuntimeError):
    pass


class NonConvergence(CoxError):
    def __init__(self, iterations, score_norm):
        self.iterations = iterations
        self.score_norm = score_norm
        super().__init__(f"Newton-Raphson did not converge after {iterations} iterations "
                         f"(score sup-norm {score_norm:.3g})")


class MonotoneLikelihood(CoxError):
    def __init__(self, beta, iterations):
        self.beta = np.asarray(beta)
        self.iterations = iterations
        super().__init__(f"coefficient diverging (|beta| > {DIVERGENCE_BOUND:g}): "
                         f"{np.array2string(self.beta, precision=3)}; covariate may be separated")


class SingularHessian(CoxError):
    pass


@dataclass(frozen=True, eq=False)
class CountingProcessView:
    """Counting-process arrays for one process.

    ``at_risk[k, i]`` is Y_i at the k-th distinct event time, ``dN[k, i]`` the
    event count there, and ``X[k, i]`` the covariates of subject i at that
    time (only meaningful where at risk). When every trajectory is constant
    ``X`` is a zero-stride broadcast of ``fixed_X``.
    """

    process: str
    covariate_names: tuple[str, ...]
    subject_ids: tuple[str, ...]
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    times: np.ndarray
    at_risk: np.ndarray
    dN: np.ndarray
    X: np.ndarray
    fixed_X: np.ndarray | None = None

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def event_counts(self) -> np.ndarray:
        return self.dN.sum(axis=1)

    def Y(self, t) -> np.ndarray:
        """At-risk indicators I(entry <= t <= exit)."""
        return ((self.entry <= t) & (t <= self.exit)).astype(float)

    def N(self, t) -> np.ndarray:
        return (self.event & (self.exit <= t)).astype(float)


def build_view(dataset: Dataset, process: str) -> CountingProcessView:
    if process not in ("P", "R"):
        raise ValueError(f"process must be 'P' or 'R', got {process!r}")
    names = dataset.covariate_names(process)
    p = len(names)
    recs = [s for s in dataset.subjects if s.observation(process) is not None]
    ids = tuple(s.id for s in recs)
    obs = [s.observation(process) for s in recs]
    entry = np.array([o.entry for o in obs], dtype=float)
    exit_ = np.array([o.exit for o in obs], dtype=float)
    event = np.array([o.event for o in obs], dtype=bool)
    times = np.unique(exit_[event])
    K, m = len(times), len(recs)

    at_risk = (entry[None, :] <= times[:, None]) & (times[:, None] <= exit_[None, :])
    dN = (event[None, :] & (exit_[None, :] == times[:, None])).astype(float)

    trajs = [s.trajectory(process) for s in recs]
    fixed = None
    if all(t.is_constant() for t in trajs):
        fixed = np.array([t.values[0] for t in trajs], dtype=float).reshape(m, p)
        X = np.broadcast_to(fixed[None, :, :], (K, m, p))
    else:
        X = np.zeros((K, m, p))
        for i, traj in enumerate(trajs):
            rows = np.flatnonzero(at_risk[:, i])
            if rows.size:
                X[rows, i, :] = traj.evaluate_many(times[rows])
    for arr in (entry, exit_, event, times, at_risk, dN):
        arr.setflags(write=False)
    if fixed is not None:
        fixed.setflags(write=False)
    else:
        X.setflags(write=False)
    return CountingProcessView(process, tuple(names), ids, entry, exit_, event, times,
                               at_risk, dN, X, fixed)


def _linear_predictor(view: CountingProcessView, b: np.ndarray) -> np.ndarray:
    if view.fixed_X is not None:
        eta = view.fixed_X @ b
        return np.broadcast_to(eta[None, :], view.at_risk.shape)
    return view.X @ b


@dataclass
class _Aggregates:
    eta: np.ndarray        # (K, m) linear predictors
    log_s0: np.ndarray     # (K,) log of sum_j Y_j exp(eta_j)
    pi: np.ndarray         # (K, m) risk-set weights, rows sum to 1
    xbar: np.ndarray       # (K, p)


def _aggregates(view: CountingProcessView, b) -> _Aggregates:
    b = np.asarray(b, dtype=float).reshape(view.n_covariates)
    if not np.all(np.isfinite(b)):
        raise ValueError("coefficient vector must be finite")
    eta = _linear_predictor(view, b)
    masked = np.where(view.at_risk, eta, -np.inf)
    c = masked.max(axis=1)
    w = np.exp(masked - c[:, None])
    s0 = w.sum(axis=1)
    pi = w / s0[:, None]
    if view.fixed_X is not None:
        xbar = pi @ view.fixed_X
    else:
        xbar = np.einsum("km,kmp->kp", pi, view.X)
    return _Aggregates(eta, np.log(s0) + c, pi, xbar)


def _second_moment(view: CountingProcessView, pi: np.ndarray) -> np.ndarray:
    """S2/S0 at each event time, shape (K, p, p)."""
    if view.fixed_X is not None:
        Xf = view.fixed_X
        return np.einsum("km,mp,mq->kpq", pi, Xf, Xf)
    return np.einsum("km,kmp,kmq->kpq", pi, view.X, view.X)


def _event_covariate_sums(view: CountingProcessView) -> np.ndarray:
    if view.fixed_X is not None:
        return view.dN @ view.fixed_X
    return np.einsum("km,kmp->kp", view.dN, view.X)


def _loglik(view, agg) -> float:
    events = np.where(view.dN > 0, view.dN * agg.eta, 0.0)
    return float(events.sum() - view.event_counts @ agg.log_s0)


def log_partial_likelihood(view: CountingProcessView, b) -> float:
    """Breslow log partial likelihood at ``b``."""
    return _loglik(view, _aggregates(view, b))


def _score_hessian(view, agg):
    d = view.event_counts
    score = (_event_covariate_sums(view) - d[:, None] * agg.xbar).sum(axis=0)
    s2 = _second_moment(view, agg.pi)
    outer = np.einsum("kp,kq->kpq", agg.xbar, agg.xbar)
    hess = np.einsum("k,kpq->pq", d, s2 - outer)
    hess = 0.5 * (hess + hess.T)
    return score, hess


def score_and_hessian(view: CountingProcessView, b) -> tuple[np.ndarray, np.ndarray]:
    """Score vector and observed information (negative Hessian of the log
    partial likelihood) at ``b``."""
    return _score_hessian(view, _aggregates(view, b))


def breslow_baseline(view: CountingProcessView, b) -> tuple[np.ndarray, np.ndarray]:
    """Baseline hazard jumps ``d_k / sum_{j at risk} exp(b'x_j(t_k))``.

    Returns
    -------
    times, jumps : ndarray
    """
    agg = _aggregates(view, b)
    return view.times.copy(), view.event_counts * np.exp(-agg.log_s0)


@dataclass(frozen=True, eq=False)
class CoxFit:
    """Result of one proportional hazards fit.

    ``hessian`` is the observed information at ``beta_hat`` (the sum over
    event times, i.e. n times its per-subject average). ``score_residuals``
    rows follow ``subject_ids`` and use the martingale form, so they sum to
    the total score.
    """

    process: str
    covariate_names: tuple[str, ...]
    beta_hat: np.ndarray
    hessian: np.ndarray
    hessian_inverse: np.ndarray
    event_times: np.ndarray
    baseline_jumps: np.ndarray
    subject_ids: tuple[str, ...]
    score_residuals: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float
    log_likelihood: float

    @property
    def std_errors(self) -> np.ndarray:
        """NaN for coordinates the data carry no information about."""
        d = np.diag(self.hessian_inverse)
        return np.where(d == 0.0, np.nan, np.sqrt(d))

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.beta_hat)

    @property
    def p_values(self) -> np.ndarray:
        from scipy.stats import norm

        z = self.beta_hat / self.std_errors
        return 2.0 * norm.sf(np.abs(z))

    @property
    def baseline(self) -> list[tuple[float, float]]:
        return list(zip(self.event_times.tolist(), self.baseline_jumps.tolist()))

    def cumulative_baseline(self, t) -> float:
        return float(self.baseline_jumps[self.event_times <= t].sum())


def _cholesky_inverse(h):
    p = h.shape[0]
    if p == 0:
        return np.zeros((0, 0))
    try:
        c = linalg.cho_factor(h, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularHessian(f"information matrix is not positive definite: {exc}") from None
    return linalg.cho_solve(c, np.eye(p))


def _flat_columns(view: CountingProcessView) -> np.ndarray:
    """Covariates constant within every risk set. They carry no information,
    keep their starting value and get no standard error."""
    p = view.n_covariates
    if p == 0 or view.times.size == 0:
        return np.zeros(p, dtype=bool)
    mask = view.at_risk[:, :, None]
    hi = np.where(mask, view.X, -np.inf).max(axis=1)
    lo = np.where(mask, view.X, np.inf).min(axis=1)
    return np.all(hi == lo, axis=0)


def _information_inverse(h, flat):
    if not flat.any():
        return _cholesky_inverse(h)
    keep = ~flat
    inv = np.zeros_like(h)
    inv[np.ix_(keep, keep)] = _cholesky_inverse(h[np.ix_(keep, keep)])
    return inv


def _score_residuals(view, agg):
    d = view.event_counts
    dM = view.dN - d[:, None] * agg.pi
    if view.fixed_X is not None:
        return dM.sum(axis=0)[:, None] * view.fixed_X - dM.T @ agg.xbar
    return np.einsum("km,kmp->mp", dM, view.X) - dM.T @ agg.xbar


def fit(view: CountingProcessView, init=None, *, tol: float = SCORE_TOL,
        max_iter: int = MAX_ITER) -> CoxFit:
    """Maximize the partial likelihood by Newton-Raphson with step halving.

    Raises
    ------
    NonConvergence
        Score sup-norm still above ``tol`` after ``max_iter`` iterations.
    MonotoneLikelihood
        Some coefficient exceeded 50 in absolute value.
    SingularHessian
        The information matrix lost positive definiteness.
    """
    p = view.n_covariates
    if view.times.size == 0:
        raise CoxError(f"no events in process {view.process}")
    b = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()

    agg = _aggregates(view, b)
    ll = _loglik(view, agg)
    score, hess = _score_hessian(view, agg)
    it = 0
    keep = ~_flat_columns(view)
    while p:
        step = np.zeros(p)
        try:
            c = linalg.cho_factor(hess[np.ix_(keep, keep)], lower=True)
        except linalg.LinAlgError:
            raise SingularHessian("information matrix is not positive definite "
                                  f"at iteration {it}") from None
        step[keep] = linalg.cho_solve(c, score[keep])
        # a small score with a large Newton step means a flat, still rising
        # likelihood: keep going so divergence reaches the bound
        if np.max(np.abs(score)) <= tol and np.max(np.abs(step)) <= STEP_TOL:
            break
        if it >= max_iter:
            raise NonConvergence(it, float(np.max(np.abs(score))))
        for _ in range(MAX_HALVINGS + 1):
            cand = b + step
            cagg = _aggregates(view, cand)
            cll = _loglik(view, cagg)
            if cll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step = step / 2
        b, agg, ll = cand, cagg, cll
        it += 1
        if np.any(np.abs(b) > DIVERGENCE_BOUND):
            raise MonotoneLikelihood(b, it)
        score, hess = _score_hessian(view, agg)

    hinv = _information_inverse(hess, ~keep)
    jumps = view.event_counts * np.exp(-agg.log_s0)
    resid = _score_residuals(view, agg)
    return CoxFit(
        process=view.process,
        covariate_names=view.covariate_names,
        beta_hat=b,
        hessian=hess,
        hessian_inverse=hinv,
        event_times=view.times.copy(),
        baseline_jumps=jumps,
        subject_ids=view.subject_ids,
        score_residuals=resid,
        converged=True,
        iterations=it,
        final_score_norm=float(np.max(np.abs(score))) if p else 0.0,
        log_likelihood=ll,
    )


def fit_view(dataset: Dataset, process: str, **kwargs) -> tuple[CountingProcessView, CoxFit]:
    view = build_view(dataset, process)
    return view, fit(view, **kwargs)
