"""Synthetic two-process data and Monte Carlo performance studies.

Random numbers come from a Philox counter-based generator keyed by
``(seed, replicate_index)``. Every subject consumes a fixed block of
uniforms, transformed by inverse CDFs, so subject ``i`` of replicate ``r``
is the same regardless of ``n``, worker count or execution order.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .analysis import fit_models
from .cox import CoxError
from .data import (
    CovariateTrajectory,
    Dataset,
    ProcessObservation,
    RestrictionWindow,
    SubjectRecord,
    ValidationError,
)
from .prediction import CounterfactualPolicy
from .variance import estimate_with_se

log = logging.getLogger(__name__)

__all__ = [
    "SimulationConfig",
    "Summary",
    "SimulationReport",
    "StudyFailure",
    "generate_replicate",
    "true_restricted_mean",
    "monte_carlo_truth",
    "run_replicate",
    "target_record",
    "counterfactual_rates",
    "run_study",
    "summarize",
    "generate_case_study",
    "CASE_STUDY_WINDOW",
]

PROMO_NAMES = ("group", "x2")
RETIRE_NAMES = ("group", "z2")
DRAWS_PER_SUBJECT = 7
MAX_EXCLUDED_FRACTION = 0.01


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 500
    replicates: int = 1000
    lambda0_P: float = 0.1
    lambda0_R: float = 1.0 / 60.0
    beta: tuple[float, float] = (-0.5, 0.1)
    theta: tuple[float, float] = (0.5, 0.1)
    censor_max: float = 200.0
    frailty_variance: float = 0.0
    policy_covariates: tuple[float, float] = (1.0, 1.0)
    tau: float = 5.0
    seed: int = 20130601
    label: str = ""
    reference_true: float | None = None

    def __post_init__(self):
        for name in ("beta", "theta", "policy_covariates"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2:
                raise ValueError(f"{name} needs two entries")
            object.__setattr__(self, name, val)
        if self.lambda0_P <= 0 or self.lambda0_R <= 0:
            raise ValueError("baseline hazards must be positive")
        if self.censor_max <= 0:
            raise ValueError("censor_max must be positive")
        if self.replicates < 1 or self.n < 2:
            raise ValueError("need replicates >= 1 and n >= 2")
        if self.frailty_variance < 0:
            raise ValueError("frailty_variance must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    @classmethod
    def from_dict(cls, raw: dict) -> "SimulationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k in ("beta", "theta", "policy_covariates"):
            out[k] = list(out[k])
        return out


def _uniforms(config: SimulationConfig, replicate_index: int) -> np.ndarray:
    bitgen = np.random.Philox(key=[int(config.seed), int(replicate_index)])
    return np.random.Generator(bitgen).random((config.n, DRAWS_PER_SUBJECT))


def _latent(config: SimulationConfig, replicate_index: int):
    u = _uniforms(config, replicate_index)
    x1 = (u[:, 0] < 0.5).astype(float)
    x2 = 10.0 * u[:, 1]
    z2 = 2.0 * special.ndtri(u[:, 2])
    v = config.frailty_variance
    if v > 0:
        w = v * special.gammaincinv(1.0 / v, u[:, 6])
    else:
        w = np.ones(config.n)
    b1, b2 = config.beta
    t1, t2 = config.theta
    rateP = config.lambda0_P * w * np.exp(b1 * x1 + b2 * x2)
    rateR = config.lambda0_R * w * np.exp(t1 * x1 + t2 * z2)
    p_star = -np.log1p(-u[:, 3]) / rateP
    r_star = -np.log1p(-u[:, 4]) / rateR
    c = config.censor_max * u[:, 5]
    return x1, x2, z2, p_star, r_star, c


def generate_replicate(config: SimulationConfig, replicate_index: int) -> Dataset:
    """One synthetic dataset; both processes start at time 0."""
    x1, x2, z2, p_star, r_star, c = _latent(config, replicate_index)
    p_exit = np.minimum(np.minimum(p_star, r_star), c)
    r_exit = np.minimum(r_star, c)
    width = len(str(config.n - 1))
    subjects = []
    for i in range(config.n):
        subjects.append(SubjectRecord(
            id=f"s{i:0{width}d}",
            promotion=ProcessObservation(0.0, float(p_exit[i]), bool(p_exit[i] == p_star[i])),
            retirement=ProcessObservation(0.0, float(r_exit[i]), bool(r_exit[i] == r_star[i])),
            x_traj=CovariateTrajectory.constant(0.0, (x1[i], x2[i])),
            z_traj=CovariateTrajectory.constant(0.0, (x1[i], z2[i])),
            protected_flag=bool(x1[i]),
        ))
    return Dataset(tuple(subjects), PROMO_NAMES, RETIRE_NAMES, "group")


def target_record(config: SimulationConfig) -> SubjectRecord:
    """Hypothetical protected-group member at the configured covariates."""
    xt, zt = config.policy_covariates
    return SubjectRecord(
        id="target",
        promotion=ProcessObservation(0.0, config.tau, False),
        retirement=ProcessObservation(0.0, config.tau, False),
        x_traj=CovariateTrajectory.constant(0.0, (1.0, xt)),
        z_traj=CovariateTrajectory.constant(0.0, (1.0, zt)),
        protected_flag=True,
    )


# ---------------------------------------------------------------------------
# true values


def _closed_form(aP, aR, tau, state):
    """Restricted means on [0, tau] under constant hazards aP, aR (vectorized)."""
    aP = np.asarray(aP, dtype=float)
    aR = np.asarray(aR, dtype=float)

    def avg(rate):
        # int_0^tau exp(-rate t) dt, stable as rate -> 0
        x = rate * tau
        return np.where(x > 1e-12, -np.expm1(-x) / np.where(x > 1e-12, rate, 1.0), tau)

    lt = avg(aP + aR)
    surv_r = avg(aR)
    if state == "lt":
        return lt
    if state == "cap":
        return surv_r - lt
    if state == "rt":
        return tau - surv_r
    raise ValueError(f"unknown state {state!r}")


def counterfactual_rates(config: SimulationConfig) -> tuple[float, float]:
    xt, zt = config.policy_covariates
    return (config.lambda0_P * math.exp(config.beta[1] * xt),
            config.lambda0_R * math.exp(config.theta[1] * zt))


def true_restricted_mean(config: SimulationConfig, state: str = "cap") -> float:
    """True restricted mean for the counterfactual target (group indicator 0).

    With frailty variance v the closed form is averaged over a mean-one
    gamma frailty by adaptive quadrature.
    """
    aP, aR = counterfactual_rates(config)
    tau = config.tau
    v = config.frailty_variance
    if v == 0:
        return float(_closed_form(aP, aR, tau, state))
    k = 1.0 / v
    logc = -special.gammaln(k) - k * math.log(v)

    def integrand(w):
        if w <= 0:
            return 0.0
        dens = math.exp(logc + (k - 1.0) * math.log(w) - w / v)
        return float(_closed_form(w * aP, w * aR, tau, state)) * dens

    val, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-12, epsrel=1e-11, limit=400)
    return float(val)


def monte_carlo_truth(config: SimulationConfig, state: str = "cap", draws: int = 10 ** 7,
                      seed: int = 7, chunk: int = 10 ** 6) -> tuple[float, float]:
    """Brute-force restricted mean by simulating latent times directly.

    Returns
    -------
    mean, standard_error
    """
    aP, aR = counterfactual_rates(config)
    tau = config.tau
    v = config.frailty_variance
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        w = rng.gamma(1.0 / v, v, size=m) if v > 0 else 1.0
        p = rng.exponential(size=m) / (w * aP)
        r = rng.exponential(size=m) / (w * aR)
        stop = np.minimum(r, tau)
        if state == "lt":
            t = np.minimum(p, stop)
        elif state == "cap":
            t = np.clip(stop - p, 0.0, None)
        elif state == "rt":
            t = tau - stop
        else:
            raise ValueError(f"unknown state {state!r}")
        total += math.fsum(t.tolist())
        total_sq += math.fsum((t * t).tolist())
        done += m
    mean = total / draws
    var = (total_sq / draws - mean ** 2) * draws / (draws - 1)
    return mean, math.sqrt(var / draws)


# ---------------------------------------------------------------------------
# studies


class StudyFailure(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def run_replicate(config: SimulationConfig, replicate_index: int) -> dict:
    """Fit one replicate; returns estimates or the reason it was excluded."""
    data = generate_replicate(config, replicate_index)
    try:
        model = fit_models(data)
    except (CoxError, ValidationError) as exc:
        return {"replicate": replicate_index, "error": f"{type(exc).__name__}: {exc}"}
    window = RestrictionWindow(0.0, config.tau)
    ests, _ = estimate_with_se(model.fitP, model.viewP, model.fitR, model.viewR,
                               target_record(config), CounterfactualPolicy("group", 0.0),
                               window, model.sample_ids)
    fp, fr = model.fitP, model.fitR
    return {
        "replicate": replicate_index,
        "cap": ests[1].value,
        "cap_se": ests[1].std_error,
        "lt": ests[0].value,
        "lt_se": ests[0].std_error,
        "rt": ests[2].value,
        "rt_se": ests[2].std_error,
        "beta1": float(fp.beta_hat[0]),
        "beta1_se": float(fp.std_errors[0]),
        "theta1": float(fr.beta_hat[0]),
        "theta1_se": float(fr.std_errors[0]),
        "censor_P": float(1.0 - model.viewP.event.mean()),
        "censor_R": float(1.0 - model.viewR.event.mean()),
    }


@dataclass(frozen=True)
class Summary:
    """Bias/ESD/ASE/CP of one estimator over replicates; ``esd`` is None
    with a single replicate."""

    true_value: float
    mean_estimate: float
    mean_bias: float
    esd: float | None
    ase: float
    cp: float

    @property
    def esd_ase_ratio(self) -> float | None:
        if self.esd is None or self.ase == 0:
            return None
        return self.esd / self.ase


def summarize(estimates, std_errors, true_value: float) -> Summary:
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(std_errors, dtype=float)
    n = len(est)
    mean = math.fsum(est.tolist()) / n
    esd = None
    if n > 1:
        esd = math.sqrt(math.fsum(((est - mean) ** 2).tolist()) / (n - 1))
    covered = np.abs(est - true_value) <= 1.96 * se
    return Summary(float(true_value), mean, mean - true_value, esd,
                   math.fsum(se.tolist()) / n, float(covered.mean()))


@dataclass(frozen=True)
class SimulationReport:
    config: SimulationConfig
    n_used: int
    n_excluded: int
    exclusions: tuple[str, ...]
    cap: Summary
    beta1: Summary
    theta1: Summary
    lt: Summary
    rt: Summary
    censoring_P: float
    censoring_R: float
    esd_defined: bool = True
    replicates: tuple[dict, ...] = field(default=(), repr=False, compare=False)

    def to_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "config": self.config.to_dict(),
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
            "exclusions": list(self.exclusions),
            "esd_defined": self.esd_defined,
            "censoring_P": self.censoring_P,
            "censoring_R": self.censoring_R,
        }
        for name in ("cap", "lt", "rt", "beta1", "theta1"):
            out[name] = dataclasses.asdict(getattr(self, name))
        if include_replicates:
            out["replicates"] = list(self.replicates)
        return out


def _run_chunk(args):
    config, indices = args
    return [run_replicate(config, r) for r in indices]


def run_study(config: SimulationConfig, workers: int = 1) -> SimulationReport:
    """Replicate, fit and aggregate.

    Raises
    ------
    StudyFailure
        When more than 1% of replicates fail to fit.
    """
    indices = list(range(config.replicates))
    if workers > 1:
        chunks = [indices[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(config, c) for c in chunks]))
        rows = sorted((r for part in parts for r in part), key=lambda r: r["replicate"])
    else:
        rows = [run_replicate(config, r) for r in indices]

    good = [r for r in rows if "error" not in r]
    bad = tuple(f"replicate {r['replicate']}: {r['error']}" for r in rows if "error" in r)
    if not good:
        raise StudyFailure("every replicate failed to fit")

    def col(key):
        return [r[key] for r in good]

    report = SimulationReport(
        config=config,
        n_used=len(good),
        n_excluded=len(bad),
        exclusions=bad,
        cap=summarize(col("cap"), col("cap_se"), true_restricted_mean(config, "cap")),
        lt=summarize(col("lt"), col("lt_se"), true_restricted_mean(config, "lt")),
        rt=summarize(col("rt"), col("rt_se"), true_restricted_mean(config, "rt")),
        beta1=summarize(col("beta1"), col("beta1_se"), config.beta[0]),
        theta1=summarize(col("theta1"), col("theta1_se"), config.theta[0]),
        censoring_P=math.fsum(col("censor_P")) / len(good),
        censoring_R=math.fsum(col("censor_R")) / len(good),
        esd_defined=len(good) > 1,
        replicates=tuple(rows),
    )
    if len(bad) > MAX_EXCLUDED_FRACTION * config.replicates:
        raise StudyFailure(f"{len(bad)} of {config.replicates} replicates failed to fit", report)
    if bad:
        log.warning("excluded %d replicate(s) that failed to fit", len(bad))
    return report


# ---------------------------------------------------------------------------
# bundled case-study data

YEAR = 365.25
# 1996-11-18 and 2003-05-31 as days since 1970-01-01
CASE_STUDY_WINDOW = RestrictionWindow(9818.0, 12203.0)
CASE_PROMO = ("white_male", "detective", "years_before_lt", "years_since_lt", "years_since_lt_sq")
CASE_RETIRE = ("white_male", "detective", "years_before_lt", "years_eligible")


def _piecewise_event(rng, start, stop, seg_starts, hazards):
    """First event of a piecewise-constant hazard on ``[start, stop)``."""
    target = rng.exponential()
    cum = 0.0
    bounds = list(seg_starts[1:]) + [np.inf]
    for s0, s1, h in zip(seg_starts, bounds, hazards):
        lo, hi = max(s0, start), min(s1, stop)
        if hi <= lo:
            continue
        if cum + h * (hi - lo) >= target:
            return lo + (target - cum) / h, True
        cum += h * (hi - lo)
    return stop, False


def generate_case_study(seed: int = 2003, n_protected: int = 112, n_other: int = 34) -> Dataset:
    """Synthetic promotion/retirement data shaped like a police-department case.

    Lieutenant dates are staggered before and during the window, retirement
    eligibility starts 25 years after hire, and seniority covariates are
    updated yearly. Times are days since 1970-01-01.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    tau0, tau1 = CASE_STUDY_WINDOW.tau0, CASE_STUDY_WINDOW.tau1
    beta = np.array([-2.1, -0.17, -0.01, 0.41, -0.02])
    theta = np.array([0.18, -0.23, -0.10, 0.12])
    base_P = 0.35 / YEAR
    base_R = 2.0 / YEAR
    subjects = []
    n = n_protected + n_other
    for i in range(n):
        wm = 1.0 if i < n_protected else 0.0
        det = float(rng.random() < 0.4)
        before = rng.uniform(9.0, 24.0)
        p1 = rng.uniform(tau0 - 8 * YEAR, tau1 - 0.5 * YEAR)
        hire = p1 - before * YEAR
        r1 = hire + 25 * YEAR

        x_starts = p1 + YEAR * np.arange(0, int((tau1 - p1) / YEAR) + 1)
        ys = (x_starts - p1) / YEAR
        x_vals = [(wm, det, before, y, y * y) for y in ys]
        hz_P = base_P * np.exp(np.array(x_vals) @ beta)
        start_P = max(p1, tau0)
        p_time, p_event = _piecewise_event(rng, start_P, tau1, x_starts, hz_P)

        retirement = z_traj = None
        r_time, r_event = np.inf, False
        if r1 < tau1:
            z_starts = r1 + YEAR * np.arange(0, int((tau1 - r1) / YEAR) + 1)
            ye = (z_starts - r1) / YEAR
            z_vals = [(wm, det, before, y) for y in ye]
            hz_R = base_R * np.exp(np.array(z_vals) @ theta)
            r_time, r_event = _piecewise_event(rng, max(r1, tau0), tau1, z_starts, hz_R)
            retirement = ProcessObservation(float(round(r1, 3)), float(round(r_time, 3)), bool(r_event))
            z_traj = CovariateTrajectory(tuple(float(round(s, 3)) for s in z_starts),
                                         tuple(tuple(round(v, 6) for v in row) for row in z_vals))
        if r_event and r_time < p_time:
            p_time, p_event = r_time, False
        subjects.append(SubjectRecord(
            id=f"L{i + 1:03d}",
            promotion=ProcessObservation(float(round(p1, 3)), float(round(p_time, 3)), bool(p_event)),
            retirement=retirement,
            x_traj=CovariateTrajectory(tuple(float(round(s, 3)) for s in x_starts),
                                       tuple(tuple(round(v, 6) for v in row) for row in x_vals)),
            z_traj=z_traj,
            protected_flag=bool(wm),
        ))
    return Dataset(tuple(subjects), CASE_PROMO, CASE_RETIRE, "white_male")
