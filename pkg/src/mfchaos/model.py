"""Coefficient sets b(t,x,mu), sigma(t,x,mu) interacting with the measure
through cylinder functionals, plus their flat and Lions derivatives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import ParticleCloud


# -- scalar test functions and outer maps ---------------------------------

@dataclass(frozen=True)
class TestFunction:
    """phi: R^d -> R with analytic gradient and Hessian; all act on (..., d)."""

    name: str
    value: Callable
    grad: Callable
    hess: Callable


def coordinate(j: int = 0) -> TestFunction:
    def grad(y):
        g = np.zeros(y.shape)
        g[..., j] = 1.0
        return g

    return TestFunction(f"y{j}", lambda y: y[..., j], grad, lambda y: np.zeros(y.shape + (y.shape[-1],)))


def square_norm() -> TestFunction:
    def hess(y):
        return np.broadcast_to(2.0 * np.eye(y.shape[-1]), y.shape + (y.shape[-1],)).copy()

    return TestFunction("|y|^2", lambda y: np.sum(y * y, axis=-1), lambda y: 2.0 * y, hess)


def _unit(y, j, vals):
    out = np.zeros(y.shape)
    out[..., j] = vals
    return out


def _unit2(y, j, vals):
    out = np.zeros(y.shape + (y.shape[-1],))
    out[..., j, j] = vals
    return out


def sine(j: int = 0) -> TestFunction:
    return TestFunction(
        f"sin(y{j})",
        lambda y: np.sin(y[..., j]),
        lambda y: _unit(y, j, np.cos(y[..., j])),
        lambda y: _unit2(y, j, -np.sin(y[..., j])),
    )


def cosine(j: int = 0) -> TestFunction:
    return TestFunction(
        f"cos(y{j})",
        lambda y: np.cos(y[..., j]),
        lambda y: _unit(y, j, -np.sin(y[..., j])),
        lambda y: _unit2(y, j, -np.cos(y[..., j])),
    )


def bump(center: float = 0.0, width: float = 1.0, j: int = 0) -> TestFunction:
    """exp(-(y_j - c)^2 / (2 w^2))."""

    def val(y):
        return np.exp(-0.5 * ((y[..., j] - center) / width) ** 2)

    def grad(y):
        return _unit(y, j, -(y[..., j] - center) / width**2 * val(y))

    def hess(y):
        u = (y[..., j] - center) / width
        return _unit2(y, j, (u * u - 1) / width**2 * val(y))

    return TestFunction(f"bump(y{j})", val, grad, hess)


@dataclass(frozen=True)
class Outer:
    """F: R^k -> R with gradient and Hessian acting on (..., k)."""

    name: str
    f: Callable
    grad: Callable
    hess: Callable


def identity_outer() -> Outer:
    return Outer("m", lambda m: m[..., 0], lambda m: np.ones(m.shape), lambda m: np.zeros(m.shape + (1,)))


def square_outer() -> Outer:
    return Outer("m^2", lambda m: m[..., 0] ** 2, lambda m: 2.0 * m, lambda m: np.full(m.shape + (1,), 2.0))


def variance_outer() -> Outer:
    """F(m1, m2) = m2 - m1^2 (variance from first two moments)."""

    def grad(m):
        return np.stack([-2.0 * m[..., 0], np.ones(m.shape[:-1])], axis=-1)

    def hess(m):
        h = np.zeros(m.shape + (2,))
        h[..., 0, 0] = -2.0
        return h

    return Outer("m2-m1^2", lambda m: m[..., 1] - m[..., 0] ** 2, grad, hess)


def sum_squares_outer(k: int = 2) -> Outer:
    def hess(m):
        return np.broadcast_to(2.0 * np.eye(k), m.shape + (k,)).copy()

    return Outer("|m|^2", lambda m: np.sum(m * m, axis=-1), lambda m: 2.0 * m, hess)


def product_outer() -> Outer:
    def grad(m):
        return np.stack([m[..., 1], m[..., 0]], axis=-1)

    def hess(m):
        h = np.zeros(m.shape + (2,))
        h[..., 0, 1] = h[..., 1, 0] = 1.0
        return h

    return Outer("m1*m2", lambda m: m[..., 0] * m[..., 1], grad, hess)


# -- cylinder functionals ---------------------------------------------------

def _cloud(mu) -> ParticleCloud:
    return mu if isinstance(mu, ParticleCloud) else ParticleCloud(np.asarray(mu, dtype=float))


@dataclass(frozen=True)
class CylinderFunctional:
    """phi(mu) = F(int phi_1 dmu, ..., int phi_k dmu)."""

    name: str
    inner: tuple
    outer: Outer

    @property
    def k(self) -> int:
        return len(self.inner)

    def inner_values(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.stack([t.value(y) for t in self.inner], axis=-1)

    def stats(self, mu) -> np.ndarray:
        mu = _cloud(mu)
        return mu.w() @ self.inner_values(mu.points)

    def __call__(self, mu) -> float:
        return float(self.outer.f(self.stats(mu)))

    def on_points(self, pts) -> np.ndarray:
        """Value at uniform empirical measures; pts has shape (..., N, d)."""
        m = self.inner_values(pts).mean(axis=-2)
        return self.outer.f(m)

    def flat_derivative(self, mu, y) -> float:
        """Normalized first linear functional derivative at y."""
        m = self.stats(mu)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return float(self.outer.grad(m) @ (self.inner_values(y) - m))

    def flat_second_derivative(self, mu, y, y2) -> float:
        """Second linear functional derivative, centred in both arguments."""
        m = self.stats(mu)
        a = self.inner_values(np.atleast_1d(np.asarray(y, dtype=float))) - m
        b = self.inner_values(np.atleast_1d(np.asarray(y2, dtype=float))) - m
        return float(a @ self.outer.hess(m) @ b)

    def lions(self, mu, v) -> np.ndarray:
        """d_mu phi(mu)(v)."""
        m = self.stats(mu)
        v = np.atleast_1d(np.asarray(v, dtype=float))
        g = np.stack([t.grad(v) for t in self.inner], axis=0)
        return self.outer.grad(m) @ g

    def lions_dv(self, mu, v) -> np.ndarray:
        """d_v d_mu phi(mu)(v)."""
        m = self.stats(mu)
        v = np.atleast_1d(np.asarray(v, dtype=float))
        h = np.stack([t.hess(v) for t in self.inner], axis=0)
        return np.tensordot(self.outer.grad(m), h, axes=(0, 0))

    def lions_second(self, mu, v, v2) -> np.ndarray:
        """d^2_mu phi(mu)(v, v2) as a d x d matrix."""
        m = self.stats(mu)
        g1 = np.stack([t.grad(np.atleast_1d(np.asarray(v, dtype=float))) for t in self.inner], axis=0)
        g2 = np.stack([t.grad(np.atleast_1d(np.asarray(v2, dtype=float))) for t in self.inner], axis=0)
        return g1.T @ self.outer.hess(m) @ g2


def linear_functional_derivative(phi: CylinderFunctional, mu, y, order: int = 1, y2=None) -> float:
    if order == 1:
        return phi.flat_derivative(mu, y)
    if order == 2:
        if y2 is None:
            raise ValueError("order 2 needs the pair (y, y2)")
        return phi.flat_second_derivative(mu, y, y2)
    raise ValueError(f"unsupported order {order}")


def lions_derivative_empirical(phi: CylinderFunctional, cloud, i: int, order: int = 1):
    """Lions derivatives of phi at the empirical measure, evaluated at atom i.

    Order 1 returns d_mu phi(m^N)(x_i). Order 2 returns the pair
    (d_v d_mu phi(m^N)(x_i), [d^2_mu phi(m^N)(x_i, x_j) for all j]).
    """
    cloud = _cloud(cloud)
    if not cloud.uniform:
        raise ValueError("empirical projection needs a uniform cloud")
    xi = cloud.points[i]
    if order == 1:
        return phi.lions(cloud, xi)
    if order == 2:
        blocks = np.stack([phi.lions_second(cloud, xi, xj) for xj in cloud.points])
        return phi.lions_dv(cloud, xi), blocks
    raise ValueError(f"unsupported order {order}")


def empirical_projection_gradient(phi: CylinderFunctional, cloud) -> np.ndarray:
    """Gradient of (x_1..x_N) -> phi(m^N_x), shape (N, d)."""
    cloud = _cloud(cloud)
    N = cloud.size
    return np.stack([phi.lions(cloud, x) for x in cloud.points]) / N


def empirical_projection_hessian(phi: CylinderFunctional, cloud) -> np.ndarray:
    """Hessian of (x_1..x_N) -> phi(m^N_x) as an (N d) x (N d) matrix."""
    cloud = _cloud(cloud)
    N, d = cloud.size, cloud.dim
    H = np.zeros((N, d, N, d))
    for i, xi in enumerate(cloud.points):
        for j, xj in enumerate(cloud.points):
            H[i, :, j, :] = phi.lions_second(cloud, xi, xj) / N**2
        H[i, :, i, :] += phi.lions_dv(cloud, xi) / N
    return H.reshape(N * d, N * d)


def builtin_functionals(d: int = 1) -> dict:
    """Named cylinder functionals used in tests and experiments."""
    return {
        "mean": CylinderFunctional("mean", (coordinate(0),), identity_outer()),
        "mean-squared": CylinderFunctional("mean-squared", (coordinate(0),), square_outer()),
        "second-moment": CylinderFunctional("second-moment", (square_norm(),), identity_outer()),
        "variance": CylinderFunctional("variance", (coordinate(0), _coord_square(0)), variance_outer()),
        "sin-mean": CylinderFunctional("sin-mean", (sine(0),), identity_outer()),
        "kuramoto-order": CylinderFunctional("kuramoto-order", (cosine(0), sine(0)), sum_squares_outer(2)),
        "bump-product": CylinderFunctional("bump-product", (bump(0.0, 1.0), sine(d - 1)), product_outer()),
    }


def _coord_square(j: int) -> TestFunction:
    return TestFunction(
        f"y{j}^2",
        lambda y: y[..., j] ** 2,
        lambda y: _unit(y, j, 2.0 * y[..., j]),
        lambda y: _unit2(y, j, np.full(y.shape[:-1], 2.0)),
    )


def get_functional(name: str, d: int = 1) -> CylinderFunctional:
    table = builtin_functionals(d)
    if name not in table:
        raise KeyError(f"unknown functional {name!r}; choose from {sorted(table)}")
    return table[name]


# -- coefficient sets -------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    """Drift and diffusion depending on the law through k statistics.

    ``drift(t, x, m)`` and ``diffusion(t, x, m)`` take states x of shape
    (..., n, d) and statistics m of shape (..., 1, k) (the integrals of the
    ``interaction`` test functions) and return (..., n, d) and
    (..., n, d, q). The time t is a scalar or broadcasts against x[..., 0].
    """

    name: str
    dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    interaction: tuple = ()
    eta: float = 1.0
    lambda_ellipticity: float = 1.0
    holder_modulus: float | None = None
    diffusion_constant: bool = False   # a independent of (t, x, mu)
    diffusion_autonomous: bool = False  # a depends on x only
    box: tuple = (-3.0, 3.0)
    params: dict = field(default_factory=dict)

    @property
    def measure_dependent(self) -> bool:
        return len(self.interaction) > 0

    def statistics(self, x, weights=None) -> np.ndarray:
        """Integrals of the interaction tests over the point axis, keepdims."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-2] + (1, len(self.interaction))
        if not self.interaction:
            return np.zeros(shape)
        vals = np.stack([t.value(x) for t in self.interaction], axis=-1)
        if weights is None:
            return vals.mean(axis=-2, keepdims=True)
        w = np.asarray(weights, dtype=float)
        return np.einsum("...n,...nk->...k", w, vals)[..., None, :]

    def a(self, t, x, m) -> np.ndarray:
        s = self.diffusion(t, x, m)
        return s @ np.swapaxes(s, -1, -2)


def evaluate_coefficients(coeffs: CoefficientSet, t, x, mu):
    """(b, sigma, a) at a single state x against the measure mu."""
    mu = _cloud(mu)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (coeffs.dim,) or mu.dim != coeffs.dim:
        raise ValueError("dimension mismatch between state, measure and coefficients")
    m = coeffs.statistics(mu.points, None if mu.uniform else mu.weights)
    xx = x[None, :]
    b = coeffs.drift(t, xx, m)[0]
    s = coeffs.diffusion(t, xx, m)[0]
    return b, s, s @ s.T


@dataclass
class SampleSpec:
    lo: float = -3.0
    hi: float = 3.0
    n_points: int = 2001
    n_times: int = 3
    t_max: float = 1.0
    n_measures: int = 4
    cloud_size: int = 16
    seed: int = 0
    grid: bool = True


@dataclass
class EllipticityReport:
    lam_min: float
    lam_max: float
    declared: float
    passed: bool


def _sample_states(coeffs: CoefficientSet, spec: SampleSpec):
    rng = np.random.default_rng(spec.seed)
    d = coeffs.dim
    if spec.grid and d == 1:
        xs = np.linspace(spec.lo, spec.hi, spec.n_points)[:, None]
    elif spec.grid and d == 2:
        g = np.linspace(spec.lo, spec.hi, max(int(math.sqrt(spec.n_points)), 2))
        xs = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    else:
        xs = rng.uniform(spec.lo, spec.hi, size=(spec.n_points, d))
    times = np.linspace(0.0, spec.t_max, spec.n_times)
    clouds = [rng.uniform(spec.lo, spec.hi, size=(spec.cloud_size, d)) for _ in range(spec.n_measures)]
    return xs, times, clouds


def check_ellipticity(coeffs: CoefficientSet, spec: SampleSpec | None = None) -> EllipticityReport:
    """Extreme eigenvalues of a = sigma sigma^T over sampled (t, x, mu)."""
    spec = spec or SampleSpec()
    xs, times, clouds = _sample_states(coeffs, spec)
    lo, hi = math.inf, -math.inf
    for t in times:
        for c in clouds:
            m = coeffs.statistics(c)
            a = coeffs.a(t, xs, m)
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite diffusion coefficient")
            ev = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))
            lo, hi = min(lo, float(ev.min())), max(hi, float(ev.max()))
    lam = coeffs.lambda_ellipticity
    ok = hi <= lam * (1 + 1e-12) and lo >= (1 / lam) * (1 - 1e-12)
    return EllipticityReport(lo, hi, lam, bool(ok))


def holder_spot_check(coeffs: CoefficientSet, spec: SampleSpec | None = None, n_pairs: int = 2000):
    """Largest sampled |a(x)-a(y)|/|x-y|^eta against 10x the declared modulus.

    Returns (observed, passed). Passes trivially when no modulus is declared
    and a is constant.
    """
    spec = spec or SampleSpec(grid=False)
    rng = np.random.default_rng(spec.seed + 1)
    d = coeffs.dim
    x = rng.uniform(spec.lo, spec.hi, size=(n_pairs, d))
    y = x + rng.uniform(-0.5, 0.5, size=(n_pairs, d))
    c = rng.uniform(spec.lo, spec.hi, size=(spec.cloud_size, d))
    m = coeffs.statistics(c)
    da = np.abs(coeffs.a(0.0, x, m) - coeffs.a(0.0, y, m)).reshape(n_pairs, -1).max(axis=1)
    dist = np.linalg.norm(x - y, axis=1) ** coeffs.eta
    obs = float(np.max(da / np.maximum(dist, 1e-300)))
    if coeffs.holder_modulus is None:
        return obs, obs == 0.0
    return obs, obs <= 10 * coeffs.holder_modulus


def check_bounded(coeffs: CoefficientSet, spec: SampleSpec | None = None) -> float:
    """Largest |b| + |sigma| seen on the test box (finite means bounded there)."""
    spec = spec or SampleSpec()
    xs, times, clouds = _sample_states(coeffs, spec)
    worst = 0.0
    for t in times:
        for c in clouds:
            m = coeffs.statistics(c)
            b = coeffs.drift(t, xs, m)
            s = coeffs.diffusion(t, xs, m)
            if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
                raise ValueError("non-finite coefficient on the test box")
            worst = max(worst, float(np.abs(b).max() + np.abs(s).max()))
    return worst


# -- registry ---------------------------------------------------------------

def _const_sigma(sigma, d):
    mat = sigma * np.eye(d)

    def diffusion(t, x, m):
        return np.broadcast_to(mat, x.shape + (d,))

    return diffusion


def constant_model(d: int = 1, sigma: float = 1.0) -> CoefficientSet:
    return CoefficientSet(
        "constant", d, d,
        drift=lambda t, x, m: np.zeros(x.shape),
        diffusion=_const_sigma(sigma, d),
        lambda_ellipticity=max(sigma**2, 1 / sigma**2) if sigma else 1.0,
        diffusion_constant=True, diffusion_autonomous=True,
        holder_modulus=None, params={"d": d, "sigma": sigma},
    )


def constant_drift_model(d: int = 1, beta: float = 1.0, sigma: float = 1.0) -> CoefficientSet:
    bvec = np.full(d, float(beta))
    return CoefficientSet(
        "constant-drift", d, d,
        drift=lambda t, x, m: np.broadcast_to(bvec, x.shape).copy(),
        diffusion=_const_sigma(sigma, d),
        lambda_ellipticity=max(sigma**2, 1 / sigma**2) if sigma else 1.0,
        diffusion_constant=True, diffusion_autonomous=True,
        params={"d": d, "beta": beta, "sigma": sigma},
    )


def ou_model(d: int = 1, theta: float = 1.0, sigma: float = 1.0) -> CoefficientSet:
    """b = -theta x, no interaction."""
    return CoefficientSet(
        "ou", d, d,
        drift=lambda t, x, m: -theta * x,
        diffusion=_const_sigma(sigma, d),
        lambda_ellipticity=max(sigma**2, 1 / sigma**2) if sigma else 1.0,
        diffusion_constant=True, diffusion_autonomous=True,
        params={"d": d, "theta": theta, "sigma": sigma},
    )


def linear_mean_field_model(d: int = 1, alpha: float = 1.0, sigma: float = 1.0) -> CoefficientSet:
    """b = alpha (mean(mu) - x), sigma constant."""
    tests = tuple(coordinate(j) for j in range(d))
    return CoefficientSet(
        "linear-mean-field", d, d,
        drift=lambda t, x, m: alpha * (m - x),
        diffusion=_const_sigma(sigma, d),
        interaction=tests,
        lambda_ellipticity=max(sigma**2, 1 / sigma**2) if sigma else 1.0,
        diffusion_constant=True, diffusion_autonomous=True,
        params={"d": d, "alpha": alpha, "sigma": sigma},
    )


def sin_diffusion_model(amplitude: float = 0.5) -> CoefficientSet:
    """b = 0, sigma(x) = sqrt(1 + amplitude sin x), d = 1."""

    def diffusion(t, x, m):
        return np.sqrt(1.0 + amplitude * np.sin(x))[..., None]

    return CoefficientSet(
        "sin-diffusion", 1, 1,
        drift=lambda t, x, m: np.zeros(x.shape),
        diffusion=diffusion,
        lambda_ellipticity=1.0 / (1.0 - amplitude),
        holder_modulus=amplitude, diffusion_autonomous=True,
        params={"amplitude": amplitude},
    )


def time_diffusion_model() -> CoefficientSet:
    """b = 0, a(t) = 1 + t, d = 1."""

    def diffusion(t, x, m):
        return np.sqrt(1.0 + np.broadcast_to(np.asarray(t, dtype=float)[..., None], x.shape))[..., None]

    return CoefficientSet(
        "time-diffusion", 1, 1,
        drift=lambda t, x, m: np.zeros(x.shape),
        diffusion=diffusion,
        lambda_ellipticity=2.0, holder_modulus=0.0, params={},
    )


def kuramoto_model(coupling: float = 1.0, sigma: float = 1.0) -> CoefficientSet:
    """b = K int sin(y - x) mu(dy), d = 1."""

    def drift(t, x, m):
        return coupling * (np.cos(x) * m[..., 1:2] - np.sin(x) * m[..., 0:1])

    return CoefficientSet(
        "kuramoto", 1, 1,
        drift=drift,
        diffusion=_const_sigma(sigma, 1),
        interaction=(cosine(0), sine(0)),
        lambda_ellipticity=max(sigma**2, 1 / sigma**2),
        diffusion_constant=True, diffusion_autonomous=True,
        params={"coupling": coupling, "sigma": sigma},
    )


def mean_field_diffusion_model(alpha: float = 1.0, amplitude: float = 0.25) -> CoefficientSet:
    """b = alpha (mean - x), a = 1 + amplitude sin(mean), d = 1.

    The diffusion depends on the law, which exercises the flow-dependent
    frozen covariance.
    """

    def diffusion(t, x, m):
        a = 1.0 + amplitude * np.sin(m[..., 0:1])
        return np.sqrt(np.broadcast_to(a, x.shape))[..., None]

    return CoefficientSet(
        "mean-field-diffusion", 1, 1,
        drift=lambda t, x, m: alpha * (m - x),
        diffusion=diffusion,
        interaction=(coordinate(0),),
        lambda_ellipticity=1.0 / (1.0 - amplitude),
        holder_modulus=0.0,
        params={"alpha": alpha, "amplitude": amplitude},
    )


REGISTRY = {
    "constant": constant_model,
    "constant-drift": constant_drift_model,
    "ou": ou_model,
    "linear-mean-field": linear_mean_field_model,
    "sin-diffusion": sin_diffusion_model,
    "time-diffusion": time_diffusion_model,
    "kuramoto": kuramoto_model,
    "mean-field-diffusion": mean_field_diffusion_model,
}


def make_model(name: str, **params) -> CoefficientSet:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}") from None
    return factory(**params)
