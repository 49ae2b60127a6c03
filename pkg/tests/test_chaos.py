from __future__ import annotations

import math

import numpy as np
import pytest

from mfchaos.chaos import (ExperimentPlan, FloorWarning, RateFitError, density_chaos_experiment,
                           first_order_terms, fit_rate, linear_binning, path_chaos_experiment,
                           silverman_bandwidth, weak_chaos_experiment)
from mfchaos.measures import ParticleCloud, RateTable
from mfchaos.model import make_model
from mfchaos.parametrix import FlowBuilder


def table_of(N, err):
    t = RateTable()
    for n, e in zip(N, err):
        t.add(n, e, 0.0)
    return t


# -- rate fits -------------------------------------------------------------------

def test_fit_exact_power_law():
    fit = fit_rate(table_of([10, 100, 1000], [7 / n for n in (10, 100, 1000)]))
    assert abs(fit.slope + 1) < 1e-9 and abs(fit.r2 - 1) < 1e-9
    assert max(abs(r) for r in fit.residuals) < 1e-9


def test_fit_seeded_noise():
    rng = np.random.default_rng(7)
    N = np.array([16, 32, 64, 128, 256, 512])
    fit = fit_rate(table_of(N, (1 + 0.05 * rng.standard_normal(N.size)) / N))
    assert abs(fit.slope + 1) <= 0.05
    assert fit.band[0] <= fit.slope <= fit.band[1]


def test_fit_needs_three_rows():
    with pytest.raises(RateFitError):
        fit_rate(table_of([10, 100], [0.1, 0.01]))
    t = table_of([10, 100, 1000], [0.1, 0.01, 0.001])
    t.flag[1] = "noise"
    with pytest.raises(RateFitError):
        fit_rate(t)


def test_fit_is_deterministic_and_epsN_predictor():
    t = table_of([64, 256, 1024], [0.5, 0.25, 0.125])
    assert fit_rate(t).to_text() == fit_rate(t).to_text()
    # in d=1 eps_N = N^{-1/2}, so an error proportional to eps_N has slope 1
    assert fit_rate(t, "log_epsN").slope == pytest.approx(1.0, abs=1e-12)


# -- plans -------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(N_list=[64, 32]), dict(N_list=[64], M=256), dict(R=10),
                                dict(statistic="energy"), dict(predictor="N"), dict(N_list=[1, 4])])
def test_plan_invariants(kw):
    with pytest.raises(ValueError):
        ExperimentPlan(**kw)


def test_density_plan_scales_replications():
    plan = ExperimentPlan(statistic="density", N_list=[16, 32], total_draws=6400, M=4096)
    assert plan.replications(16) == 400 and plan.replications(32) == 200
    with pytest.raises(ValueError):
        ExperimentPlan(statistic="density", N_list=[16, 32], total_draws=900, M=4096)


# -- KDE plumbing ------------------------------------------------------------------

def test_silverman_bandwidth():
    x = np.random.default_rng(0).standard_normal(100_000)
    assert silverman_bandwidth(x) == pytest.approx(0.9 * 100_000 ** -0.2, rel=0.02)


def test_linear_binning_conserves_mass_and_mean():
    x = np.random.default_rng(1).uniform(-1.0, 1.0, 1000)
    counts = linear_binning(x, -2.0, 0.1, 41)
    grid = -2.0 + 0.1 * np.arange(41)
    assert counts.sum() == pytest.approx(1000)
    assert counts @ grid == pytest.approx(x.sum(), abs=1e-9)
    assert linear_binning(np.array([5.0]), -2.0, 0.1, 41).sum() == 0.0


# -- weak level ---------------------------------------------------------------------

def small_weak(**kw):
    base = dict(statistic="weak", model="constant", init={"kind": "point", "loc": 0.0}, N_list=[4, 16, 64],
                R=2000, M=1024, dt=0.05, T=1.0, seed=3)
    base.update(kw)
    return ExperimentPlan(**base)


def test_weak_exact_bias():
    table = weak_chaos_experiment(small_weak())
    for N, b, se in zip(table.N, table.meta["signed_bias"], table.stderr):
        # the reference flow's own mean square is part of the target
        assert abs(b - 1 / N) <= 3 * se + 4 / 1024, N


@pytest.mark.parametrize("model", ["constant", "linear-mean-field", "kuramoto"])
def test_weak_linear_functional_unbiased(model):
    table = weak_chaos_experiment(small_weak(model=model, functional="mean", R=500,
                                             init={"kind": "gaussian", "loc": 0.0, "scale": 1.0}))
    ref_se = 1 / math.sqrt(1024)
    for err, se in zip(table.error, table.stderr):
        assert err <= 3 * math.hypot(se, ref_se)


def test_weak_deterministic_across_threads(tmp_path):
    a = weak_chaos_experiment(small_weak(threads=1))
    b = weak_chaos_experiment(small_weak(threads=4))
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# -- path level --------------------------------------------------------------------

def small_path(**kw):
    base = dict(statistic="path", N_list=[8, 32, 128], R=40, M=2048, dt=0.02, T=0.5, seed=5)
    base.update(kw)
    return ExperimentPlan(**base)


def test_path_measure_independent_is_pure_sampling():
    with pytest.warns(FloorWarning):
        table = path_chaos_experiment(small_path(model="constant", N_list=[8, 32, 128]))
    assert table.meta["path_part"] == [0.0, 0.0, 0.0]
    assert table.error == pytest.approx(table.meta["w2_part"])


def test_path_errors_decrease_and_are_deterministic():
    plan = small_path()
    with pytest.warns(FloorWarning):
        a = path_chaos_experiment(plan)
    assert all(y < x for x, y in zip(a.error, a.error[1:]))
    with pytest.warns(FloorWarning):
        b = path_chaos_experiment(small_path(threads=3))
    assert a.error == b.error and a.stderr == b.stderr


# -- density level -----------------------------------------------------------------

def small_density(loc=0.0, **kw):
    base = dict(statistic="density", N_list=[8, 16], total_draws=8192, M=1024, dt=0.05, T=0.5, seed=4,
                init={"kind": "gaussian", "loc": loc, "scale": 1.0}, grid_step=0.02,
                parametrix={"K": 4, "splits": 2, "stage_spacing": 0.7, "rules": "fast"})
    base.update(kw)
    return ExperimentPlan(**base)


def test_density_translation_invariant():
    a = density_chaos_experiment(small_density(0.0))
    b = density_chaos_experiment(small_density(1.5))
    np.testing.assert_allclose(b.error, a.error, rtol=1e-3)
    assert a.meta["oracle_mass"] == pytest.approx(1.0, abs=1e-3)
    assert all(e > 0 for e in a.error)


def test_density_constant_model_rows_are_noise_level():
    table = density_chaos_experiment(small_density(model="constant"))
    # no interaction: the error is KDE noise, the same order at every N
    assert max(table.error) < 4 * min(table.error)
    for e, se in zip(table.error, table.stderr):
        assert e < 10 * se


# -- first-order expansion -----------------------------------------------------------

MU0 = ParticleCloud(np.array([[-0.8], [0.0], [0.9]]), np.array([0.3, 0.4, 0.3]))
ZS = np.array([-1.0, 0.0, 1.0])
T_FO = 0.5


def closed_form_terms(T):
    """Correction terms for dX = (m - X) dt + dW started at MU0."""
    x, w = MU0.points[:, 0], MU0.w()
    m = w @ x
    var = w @ (x - m) ** 2
    c = math.exp(-T)
    v = (1 - c * c) / 2
    u = ZS[:, None] - m * (1 - c) - x[None, :] * c
    g = np.exp(-u**2 / (2 * v)) / math.sqrt(2 * math.pi * v)
    g1 = -u / v * g
    g2 = (u**2 / v**2 - 1 / v) * g
    term1 = -(1 - c) * (g1 * (x - m)) @ w
    term2 = 0.5 * (1 - c) ** 2 * var * (g2 @ w)
    integrand0 = 0.5 * (1 - c * c) * (g2 @ w)
    return term1, term2, integrand0


def run_first_order(dt):
    coeffs = make_model("linear-mean-field")
    return first_order_terms(coeffs, MU0, T_FO, ZS, K=6, builder=FlowBuilder(coeffs, M=2048, dt=dt),
                             n_time=2, n_quant=4)


@pytest.fixture(scope="module")
def first_order():
    return run_first_order(0.02)


def test_first_order_vanishes_without_interaction():
    coeffs = make_model("constant")
    rec = first_order_terms(coeffs, MU0, 1.0, ZS, K=2)
    for term in (rec.term1, rec.term2, rec.term3):
        assert np.abs(term).max() < 1e-6
    assert not rec.fd_noise


def test_first_order_matches_closed_forms(first_order):
    t1, t2, i0 = closed_form_terms(T_FO)
    np.testing.assert_allclose(first_order.term1, t1, atol=1e-3)
    np.testing.assert_allclose(first_order.term2, t2, atol=2e-3)
    np.testing.assert_allclose(first_order.integrand[0], i0, atol=1e-2)
    assert np.all(np.isfinite(first_order.integrand))


def test_first_order_term3_stable_under_flow_refinement(first_order):
    fine = run_first_order(0.01)
    scale = np.abs(first_order.term3).max()
    assert np.abs(fine.term3 - first_order.term3).max() < 0.1 * scale
