from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from mfchaos.gaussian import (Covariance, SeriesNotConverged, beta_product_bound, beta_tail_sum,
                              gaussian_density, hermite, mittag_leffler, space_time_constant,
                              verify_hermite_identities)


@pytest.mark.parametrize("cov,x,expected", [
    (1.0, [0.0], 0.3989423),
    (2 * np.eye(2), [0.0, 0.0], 0.0795775),
    (1.0, [1.0], 0.2419707),
])
def test_density_examples(cov, x, expected):
    assert gaussian_density(cov, x) == pytest.approx(expected, abs=5e-8)


def test_density_symmetric_and_positive():
    cov = Covariance(np.array([[1.0, 0.3], [0.3, 2.0]]))
    x = np.array([0.7, -1.2])
    assert gaussian_density(cov, x) == pytest.approx(gaussian_density(cov, -x), rel=1e-14)
    assert gaussian_density(cov, 30 * x) > 0


def test_covariance_rejects_bad_input():
    with pytest.raises(ValueError):
        Covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        Covariance(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        Covariance(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        gaussian_density(np.eye(2), [1.0])


@pytest.mark.parametrize("d", [1, 2])
def test_density_integrates_to_one(d):
    cov = np.diag([1.0, 2.0][:d])
    sd = np.sqrt(np.diag(cov))
    axes = [np.linspace(-8 * s, 8 * s, 401) for s in sd]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    cell = np.prod([a[1] - a[0] for a in axes])
    assert gaussian_density(cov, pts).sum() * cell == pytest.approx(1.0, abs=1e-6)


def test_hermite_examples():
    assert hermite(1.0, [2.0], 1).values[0] == pytest.approx(-2.0)
    np.testing.assert_allclose(hermite(np.eye(2), [0.0, 0.0], 2).values, -np.eye(2))
    with pytest.raises(ValueError):
        hermite(1.0, [0.0], 3)


def test_hermite_order4_against_fourth_difference():
    x, h = 0.7, 1e-2
    g = lambda y: gaussian_density(1.0, [y])  # noqa: E731
    d4 = lambda h: (g(x + 2 * h) - 4 * g(x + h) + 6 * g(x) - 4 * g(x - h) + g(x - 2 * h)) / h**4  # noqa: E731
    extrap = d4(h / 2) + (d4(h / 2) - d4(h)) / 3
    assert hermite(1.0, [x], 4).values.item() == pytest.approx(extrap / g(x), abs=1e-5)


def test_hermite_tensors_symmetric():
    cov = np.array([[1.5, 0.2], [0.2, 0.8]])
    H2 = hermite(cov, [0.3, -0.9], 2).values
    H4 = hermite(cov, [0.3, -0.9], 4).values
    np.testing.assert_allclose(H2, H2.T, atol=1e-14)
    for perm in [(1, 0, 2, 3), (0, 2, 1, 3), (3, 1, 2, 0)]:
        np.testing.assert_allclose(H4, H4.transpose(perm), atol=1e-13)


def test_identity_residual_examples():
    r = verify_hermite_identities(1.0, [0.0])
    assert r["r1"] < 1e-10
    r = verify_hermite_identities(1.0, [1.0], fd_step=1e-4)
    assert r["r1"] < 1e-6 and r["r2"] < 1e-5
    r = verify_hermite_identities(np.diag([1.0, 2.0]), [0.3, -0.4])
    assert max(r.values()) < 1e-5


def test_identities_at_random_pairs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 3))
        A = rng.normal(size=(d, d))
        cov = A @ A.T + 0.5 * np.eye(d)
        x = rng.normal(size=d)
        worst = max(worst, max(verify_hermite_identities(cov, x, 1e-4).values()))
    assert worst < 1e-5


def test_mittag_leffler_examples():
    assert mittag_leffler(1, 1, 1) == pytest.approx(math.e, abs=1e-7)
    assert mittag_leffler(2, 1, 1) == pytest.approx(math.cosh(1.0), abs=1e-7)
    assert mittag_leffler(1.5, 2, 0) == pytest.approx(1.0)
    assert mittag_leffler(1, 1, -3.0) == pytest.approx(math.exp(-3.0), rel=1e-9)


def test_mittag_leffler_nonconvergence_is_reported():
    val, ok, n = mittag_leffler(0.1, 1.0, 3.0, full_output=True)
    assert not ok and n == 501
    with pytest.raises(SeriesNotConverged) as info:
        mittag_leffler(0.1, 1.0, 3.0)
    assert info.value.partial == val
    # terms that outgrow float range stop the sum early, still unconverged
    _, ok, n = mittag_leffler(0.05, 1.0, 20.0, full_output=True)
    assert not ok and n < 501
    with pytest.raises(ValueError):
        mittag_leffler(0, 1, 1)


def test_beta_product_examples():
    assert beta_product_bound(0, 0.5, 0.3, 7.0) == 1.0
    assert beta_product_bound(1, 1.0, 1.0, 1.0) == pytest.approx(2.0)
    assert beta_product_bound(2, 1.0, 1.0, 1.0) == pytest.approx(math.pi, abs=1e-7)


@given(eta=st.floats(0.05, 1.0), dt=st.floats(1e-3, 2.0), C=st.floats(0.1, 10.0))
@settings(max_examples=50, deadline=None)
def test_beta_product_ratio(eta, dt, C):
    for k in range(1, 11):
        ratio = beta_product_bound(k, eta, dt, C) / beta_product_bound(k - 1, eta, dt, C)
        expected = C * dt ** (eta / 2) * special.beta(1 + (k - 1) * eta / 2, eta / 2)
        assert ratio == pytest.approx(expected, rel=1e-12)


def test_beta_tail_sum_matches_direct_sum():
    direct = sum(beta_product_bound(k, 1.0, 0.5, 2.0) for k in range(4, 200))
    assert beta_tail_sum(3, 1.0, 0.5, 2.0) == pytest.approx(direct, rel=1e-10)


@pytest.mark.parametrize("d", [1, 2])
def test_space_time_inequality(d):
    worst = 0.0
    for p in (1, 2):
        C = space_time_constant(p, d)
        for t in (0.01, 0.1, 1.0):
            r = np.linspace(-10, 10, 2001) * math.sqrt(t)
            x = np.zeros((r.size, d))
            x[:, 0] = r
            lhs = np.abs(r) ** p * gaussian_density(t * np.eye(d), x)
            rhs = t ** (p / 2) * gaussian_density(2 * t * np.eye(d), x)
            worst = max(worst, float(np.max(lhs / rhs)) / C)
    assert worst <= 1 + 1e-9
    assert worst > 0.99  # the constant is attained on the grid
