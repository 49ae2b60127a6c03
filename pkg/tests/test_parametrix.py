from __future__ import annotations

import math

import numpy as np
import pytest

from mfchaos.gaussian import beta_product_bound, scalar_gaussian
from mfchaos.measures import ParticleCloud
from mfchaos.model import make_model
from mfchaos.parametrix import (FlowBuilder, FrozenProxyContext, SpaceRule, TimeRule, calibrate_kernel_constant,
                                envelope, export_density_csv, fast_rules, frozen_gaussian_proxy, gaussian_bound_check,
                                kernel_batch, kolmogorov_residual, mckean_density, parametrix_kernel,
                                parametrix_series, proxy_constant, space_integral, spacetime_convolve)
from mfchaos.simulator import InitSpec, SimConfig, picard_mean_field_flow


def ctx_for(name, T=1.0, s=0.0, **params):
    return FrozenProxyContext(make_model(name, **params), None, s=s, T=T)


@pytest.fixture(scope="module")
def lmf_ctx():
    coeffs = make_model("linear-mean-field")
    flow = picard_mean_field_flow(coeffs, InitSpec("gaussian", 0.0, 1.0), SimConfig(N=4096, dt=0.01, T=1.0))
    return FrozenProxyContext(coeffs, flow, s=0.0, T=1.0)


# -- proxy and kernel -------------------------------------------------------------

def test_proxy_examples():
    assert frozen_gaussian_proxy(ctx_for("constant"), 0.0, 1.0, 0.3, 0.3, 0.3) == pytest.approx(0.3989423, abs=1e-7)
    ctx = ctx_for("time-diffusion")
    assert frozen_gaussian_proxy(ctx, 0.0, 1.0, 0.0, 0.0, 0.0) == pytest.approx(0.3257350, abs=1e-7)
    ctx = ctx_for("constant", sigma=math.sqrt(2.5))
    assert frozen_gaussian_proxy(ctx, 0.2, 0.6, 1.0, 5.0, 1.0) == pytest.approx((2 * math.pi * 2.5 * 0.4) ** -0.5)
    with pytest.raises(ValueError):
        frozen_gaussian_proxy(ctx, 0.6, 0.2, 0.0, 0.0, 0.0)


def test_kernel_examples():
    assert parametrix_kernel(ctx_for("constant"), 0.0, 1.0, 0.0, 1.0) == 0.0
    # b H1(1, z - x) g with H1 = -(z - x): d/dx of g(1, z - x) is +(z - x) g
    assert parametrix_kernel(ctx_for("constant-drift"), 0.0, 1.0, 0.0, 1.0) == pytest.approx(0.2419707, abs=1e-7)
    assert parametrix_kernel(ctx_for("sin-diffusion"), 0.0, 1.0, 0.4, 0.4) == 0.0
    with pytest.raises(ValueError):
        parametrix_kernel(ctx_for("constant"), 1.0, 1.0, 0.0, 0.0)


def test_kernel_is_a_start_point_derivative():
    ctx = ctx_for("sin-diffusion")
    r, t, x, y, h = 0.1, 0.8, 0.3, -0.5, 1e-4

    def proxy(xx):
        return frozen_gaussian_proxy(ctx, r, t, xx, y, y)

    a = lambda v: 1 + 0.5 * math.sin(v)  # noqa: E731
    d2 = (proxy(x + h) - 2 * proxy(x) + proxy(x - h)) / h**2
    assert parametrix_kernel(ctx, r, t, x, y) == pytest.approx(0.5 * (a(x) - a(y)) * d2, abs=1e-6)


# -- convolution --------------------------------------------------------------------

def gauss_kernel(t1, t2, x, y):
    return scalar_gaussian((t2 - t1)[..., None], y[..., 0] - x[..., 0])


def test_convolution_examples():
    zero = spacetime_convolve(gauss_kernel, lambda t1, t2, x, y: np.zeros(x.shape[:-1]), 0.0, 1.0)
    assert zero(0.0, 1.0) == 0.0
    val = space_integral(lambda y: scalar_gaussian(0.5, y[:, 0]) * scalar_gaussian(0.5, 1.0 - y[:, 0]),
                         [0.5], [[0.25]])
    assert val == pytest.approx(0.2419707245, abs=1e-8)


def test_convolution_refinement_and_table_agreement():
    ctx = ctx_for("constant-drift")

    def H(t1, t2, x, y):
        return kernel_batch(ctx, t1, t2, x, y)

    coarse = spacetime_convolve(gauss_kernel, H, 0.0, 1.0)(0.0, 1.0)
    fine = spacetime_convolve(gauss_kernel, H, 0.0, 1.0, TimeRule(32), SpaceRule(64))(0.0, 1.0)
    assert abs(coarse - fine) < 1e-6
    _, _ = parametrix_series(ctx, 1, 0.0, 1.0, 1.0)
    field = next(f for f in ctx.fields.values())
    assert field.term(1, 1.0, [[1.0]])[0] == pytest.approx(fine, abs=1e-6)


# -- series ----------------------------------------------------------------------

def test_series_exact_for_constant_coefficients():
    ctx = ctx_for("constant")
    z = np.linspace(-3, 3, 13)[:, None]
    for K in (0, 3):
        vals, tb = parametrix_series(ctx, K, 0.2, z, 0.7)
        np.testing.assert_allclose(vals, scalar_gaussian(0.7, z[:, 0] - 0.2), atol=1e-14)
        assert np.all(tb == 0)


def test_series_constant_drift_oracle():
    ctx = ctx_for("constant-drift")
    val, tb = parametrix_series(ctx, 4, 0.0, 1.0, 1.0)
    assert abs(val - 0.3989423) < max(1e-3, tb)


def test_series_telescoping_and_envelopes():
    for name in ("constant-drift", "sin-diffusion"):
        ctx = ctx_for(name)
        calibrate_kernel_constant(ctx)
        z = np.linspace(-3, 3, 25)[:, None]
        for t in (0.3, 1.0):
            v3, _ = parametrix_series(ctx, 3, 0.0, z, t, t_max=1.0)
            v4, _ = parametrix_series(ctx, 4, 0.0, z, t, t_max=1.0)
            field = next(f for f in ctx.fields.values() if f.K >= 4)
            assert np.abs((v4 - v3) - field.term(4, t, z)).max() < 1e-10
            env = proxy_constant(ctx) * envelope(ctx, t, z)
            for k in range(5):
                bound = beta_product_bound(k, ctx.coeffs.eta, t, ctx.kernel_constant) * env
                assert np.all(np.abs(field.term(k, t, z)) <= bound), (name, t, k)


def test_positive_once_tail_is_small():
    ctx = ctx_for("sin-diffusion")
    z = np.linspace(-1, 1, 21)[:, None]
    vals, tb = parametrix_series(ctx, 10, 0.0, z, 0.5)
    proxy = np.array([frozen_gaussian_proxy(ctx, 0.0, 0.5, 0.0, zz, zz) for zz in z])
    assert tb.max() < 0.5 * proxy.min()  # premise holds on this grid
    assert np.all(vals > 0)


def test_truncation_cap_warns():
    ctx = ctx_for("constant-drift", beta=3.0)
    with pytest.warns(RuntimeWarning, match="truncation insufficient"):
        parametrix_series(ctx, 1, 0.0, 0.0, 1.0, cap=1e-12)


def test_gaussian_upper_bound_form(lmf_ctx):
    calibrate_kernel_constant(lmf_ctx)
    check = gaussian_bound_check(lmf_ctx, 6, [-1.0, 0.0, 1.0], n_samples=100, seed=1)
    assert check.violations == 0 and check.max_ratio <= check.C


# -- mean-field density ------------------------------------------------------------

def test_mckean_examples():
    ctx = ctx_for("constant")
    mix = ParticleCloud(np.array([[0.0], [1.0]]))
    assert mckean_density(ctx, mix, 1.0, 0.0, 0) == pytest.approx(0.3204565, abs=1e-7)
    ctx = ctx_for("constant-drift")
    single = ParticleCloud(np.array([[0.4]]))
    assert mckean_density(ctx, single, 1.0, 0.9, 4) == parametrix_series(ctx, 4, 0.4, 0.9, 1.0)[0]


def test_mckean_linear_in_mu():
    ctx = ctx_for("sin-diffusion")
    a = ParticleCloud(np.array([[-0.5], [0.2]]), np.array([0.3, 0.7]))
    b = ParticleCloud(np.array([[1.0]]))
    half = ParticleCloud(np.vstack([a.points, b.points]), np.append(0.5 * a.w(), 0.5))
    z = np.linspace(-2, 2, 9)[:, None]
    lhs = mckean_density(ctx, half, 1.0, z, 3)
    rhs = 0.5 * mckean_density(ctx, a, 1.0, z, 3) + 0.5 * mckean_density(ctx, b, 1.0, z, 3)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-15)


def test_mckean_normalized(lmf_ctx):
    mu0 = InitSpec("gaussian").quadrature(1, n=12)
    z = np.linspace(-6, 6, 241)
    # atoms far out feel a large drift; carrying the law over four stages
    # keeps each stage's series short
    p = mckean_density(lmf_ctx, mu0, 1.0, z[:, None], 3, splits=4)
    assert abs(p.sum() * (z[1] - z[0]) - 1.0) < 1e-4


def test_export_csv(tmp_path):
    ctx = ctx_for("constant")
    export_density_csv(tmp_path / "d.csv", ctx, [0.0, 1.0], np.array([0.0, 0.5]), 1.0, 0)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "x,z,value,tail_bound" and len(lines) == 5


# -- backward Kolmogorov residual --------------------------------------------------

ATOMS = ParticleCloud(np.array([[-0.5], [0.3], [1.0]]))
Z = np.linspace(-2, 2, 9)[:, None]


def test_residual_constant_coefficients():
    r1 = kolmogorov_residual(ctx_for("constant", s=0.2), ATOMS, 1.0, Z, fd=(1e-3, 1e-3), K=0)
    r2 = kolmogorov_residual(ctx_for("constant", s=0.2), ATOMS, 1.0, Z, fd=(5e-4, 5e-4), K=0)
    assert r1.value < 1e-5 and not r1.underflow
    assert 3.2 <= r1.value / r2.value <= 4.8
    shifted = kolmogorov_residual(ctx_for("constant", s=0.5), ATOMS, 1.3, Z, fd=(1e-3, 1e-3), K=0)
    np.testing.assert_allclose(shifted.residual, r1.residual, atol=1e-8)
    assert "max_abs_residual" in r1.to_text()


def test_residual_measure_dependent():
    coeffs = make_model("linear-mean-field")
    mu = ParticleCloud(np.array([[-0.5], [0.5]]))
    builder = FlowBuilder(coeffs, M=1024, dt=0.02)
    ctx = FrozenProxyContext(coeffs, FlowBuilder(coeffs)(mu, 0.5, 1.0), s=0.5, T=1.0)
    z = np.linspace(-1.5, 1.5, 7)
    short = kolmogorov_residual(ctx, mu, 1.0, z, fd=(1e-2, 1e-2), K=3, builder=builder, **fast_rules())
    long = kolmogorov_residual(ctx, mu, 1.0, z, fd=(1e-2, 1e-2), K=10, builder=builder, **fast_rules())
    # the residual is dominated by series truncation and shrinks with K
    assert long.value < 5e-4 and not long.underflow
    assert long.value < 0.1 * short.value
