import math
from dataclasses import replace

import numpy as np
import pytest

from factories import const_subject, jackknife, keep_columns, random_dataset, refit_estimate
from rmtenure.analysis import fit_models
from rmtenure.cox import build_view, fit
from rmtenure.data import Dataset, RestrictionWindow
from rmtenure.prediction import STATES, CounterfactualPolicy
from rmtenure.simulation import SimulationConfig, generate_replicate, target_record
from rmtenure.variance import (
    estimate_with_se,
    influence_decomposition,
    martingale_increments,
    restricted_mean_se,
    xi_terms,
)

POLICY = CounterfactualPolicy("group", 0.0)


@pytest.fixture(scope="module")
def small_model():
    return fit_models(random_dataset(np.random.default_rng(31), n=40, p=2, q=2))


@pytest.fixture(scope="module")
def sim200():
    """Single-covariate constant-hazard sample and its target subject."""
    cfg = SimulationConfig(n=200, replicates=1, seed=77)
    ds = keep_columns(generate_replicate(cfg, 0), ("group",), ("group",))
    target = keep_columns(Dataset((target_record(cfg),), ("group", "x2"), ("group", "z2")),
                          ("group",), ("group",)).subjects[0]
    return cfg, ds, target, fit_models(ds)


# ---------------------------------------------------------------- martingale increments


def test_increments_sum_to_zero(small_model):
    for view, f in ((small_model.viewP, small_model.fitP), (small_model.viewR, small_model.fitR)):
        times, dM = martingale_increments(view, f)
        assert np.array_equal(times, f.event_times)
        assert np.max(np.abs(dM.sum(axis=1))) <= 1e-10
        # not at risk and no event: no increment
        assert np.all(dM[~view.at_risk] == 0.0)


def test_null_model_increments():
    m = 5
    subs = [const_subject(str(i), 0.0, 1.0 if i == 0 else 2.0, i == 0, (0.0,)) for i in range(m)]
    view = build_view(Dataset(tuple(subs), ("x",), ("x",)), "P")
    _, dM = martingale_increments(view, fit(view))
    assert dM[0, 0] == pytest.approx(1 - 1 / m, abs=1e-15)
    assert np.allclose(dM[0, 1:], -1 / m, atol=1e-15)


def test_score_residuals_sum_to_zero(small_model):
    for f in (small_model.fitP, small_model.fitR):
        assert np.max(np.abs(f.score_residuals.sum(axis=0))) <= 1e-8


# ---------------------------------------------------------------- influence terms


def test_unrelated_sample_subject_has_no_influence(small_model):
    rec = small_model.dataset.subjects[5]
    win = RestrictionWindow(0.5, 6.0)
    ids = small_model.sample_ids + ("ghost",)
    dec = influence_decomposition(small_model.fitP, small_model.viewP, small_model.fitR,
                                  small_model.viewR, rec, None, win, ids)
    row = xi_terms(dec, "ghost")
    for key in ("xi1_P", "xi2_P", "xi1_R", "xi2_R"):
        assert np.all(row[key] == 0.0)
    assert all(row[f"integral_{s}"] == 0.0 for s in STATES)


def test_degenerate_retirement_contributes_nothing(small_model):
    rec = next(s for s in small_model.dataset.subjects if s.retirement is None)
    win = RestrictionWindow(0.0, 6.0)
    dec = influence_decomposition(small_model.fitP, small_model.viewP, small_model.fitR,
                                  small_model.viewR, rec, None, win)
    assert np.all(dec.S_R == 1.0)
    assert np.all(dec.xi1_R == 0.0) and np.all(dec.xi2_R == 0.0)
    assert np.allclose(dec.xi("cap"), -(dec.xi1_P + dec.xi2_P), atol=0)
    assert np.all(dec.xi("rt") == 0.0)


def test_integrals_average_to_zero(small_model):
    win = RestrictionWindow(0.5, 6.0)
    for rec in small_model.dataset.subjects[:8]:
        dec = influence_decomposition(small_model.fitP, small_model.viewP, small_model.fitR,
                                      small_model.viewR, rec, None, win)
        for s in STATES:
            ints = dec.integrals(s)
            assert abs(ints.mean()) <= 1e-8 * max(1.0, np.abs(ints).max())


def test_state_influences_partition(small_model):
    rec = small_model.dataset.subjects[2]
    dec = influence_decomposition(small_model.fitP, small_model.viewP, small_model.fitR,
                                  small_model.viewR, rec, None, RestrictionWindow(0.0, 6.0))
    # lt + cap + rt is fixed, so the influences cancel
    total = dec.xi("lt") + dec.xi("cap") + dec.xi("rt")
    assert np.max(np.abs(total)) <= 1e-12


# ---------------------------------------------------------------- standard errors


def test_zero_integrals_zero_se():
    assert restricted_mean_se(np.zeros(10), 10) == 0.0


@pytest.mark.parametrize("k", [2, 3, 7])
def test_se_shrinks_with_duplicated_rows(k):
    rng = np.random.default_rng(k)
    ints = rng.normal(size=50)
    se = restricted_mean_se(ints, 50)
    assert restricted_mean_se(np.tile(ints, k), 50 * k) == pytest.approx(se / math.sqrt(k), rel=1e-13)


def test_se_invariant_to_subject_order():
    rng = np.random.default_rng(41)
    ds = random_dataset(rng, n=40)
    perm = rng.permutation(len(ds.subjects))
    shuffled = Dataset(tuple(ds.subjects[i] for i in perm), ds.promo_covariate_names,
                       ds.retire_covariate_names)
    win = RestrictionWindow(0.5, 6.0)
    m1, m2 = fit_models(ds), fit_models(shuffled)
    for rec in ds.subjects[:6]:
        e1, _ = estimate_with_se(m1.fitP, m1.viewP, m1.fitR, m1.viewR, rec, None, win)
        e2, _ = estimate_with_se(m2.fitP, m2.viewP, m2.fitR, m2.viewR, rec, None, win)
        for a, b in zip(e1, e2):
            assert abs(a.value - b.value) <= 1e-12 and abs(a.std_error - b.std_error) <= 1e-12


def test_se_nonnegative_finite(small_model):
    win = RestrictionWindow(0.5, 6.0)
    for rec in small_model.dataset.subjects:
        if rec.promotion.entry >= win.tau1:
            continue
        ests, _ = estimate_with_se(small_model.fitP, small_model.viewP, small_model.fitR,
                                   small_model.viewR, rec, None, win)
        assert all(math.isfinite(e.std_error) and e.std_error >= 0 for e in ests)


def test_influence_matches_jackknife(sim200):
    cfg, ds, rec, model = sim200
    win = RestrictionWindow(0.0, cfg.tau)
    ests, dec = estimate_with_se(model.fitP, model.viewP, model.fitR, model.viewR, rec, POLICY, win)
    pseudo, jk_se = jackknife(ds, rec, POLICY, win)
    assert abs(ests[1].std_error / jk_se - 1) < 0.10
    assert np.corrcoef(dec.integrals("cap"), pseudo)[0, 1] > 0.95


def test_se_close_to_bootstrap(sim200):
    cfg, ds, rec, model = sim200
    win = RestrictionWindow(0.0, cfg.tau)
    ests, _ = estimate_with_se(model.fitP, model.viewP, model.fitR, model.viewR, rec, POLICY, win)
    rng = np.random.default_rng(5)
    subs = ds.subjects
    boots = []
    for _ in range(200):
        idx = rng.integers(0, len(subs), size=len(subs))
        # resampled copies need distinct ids
        draw = [replace(subs[i], id=f"{subs[i].id}#{j}") for j, i in enumerate(idx)]
        boots.append(refit_estimate(draw, ds.promo_covariate_names, ds.retire_covariate_names,
                                    rec, POLICY, win))
    sd = float(np.std(boots, ddof=1))
    assert abs(ests[1].std_error / sd - 1) < 0.25
