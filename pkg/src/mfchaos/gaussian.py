"""Gaussian kernels, Hermite tensors and the special functions used to
bound parametrix series."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special


class SeriesNotConverged(ArithmeticError):
    """Raised when a power series hits its term cap before the tolerance."""

    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class Covariance:
    """Symmetric positive definite d x d matrix, factorized once."""

    matrix: np.ndarray
    dim: int = field(init=False)
    chol: np.ndarray = field(init=False, repr=False)
    inv: np.ndarray = field(init=False, repr=False)
    logdet: float = field(init=False, repr=False)

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"covariance must be square, got shape {m.shape}")
        scale = max(np.abs(m).max(), np.finfo(float).tiny)
        if np.abs(m - m.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        m = 0.5 * (m + m.T)
        tr = np.trace(m)
        try:
            L = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        if not tr > 0 or np.diag(L).min() ** 2 < 1e-12 * tr:
            raise ValueError("covariance is not positive definite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "dim", m.shape[0])
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "inv", np.linalg.inv(m))
        object.__setattr__(self, "logdet", 2.0 * np.log(np.diag(L)).sum())

    @classmethod
    def of(cls, cov) -> "Covariance":
        if isinstance(cov, Covariance):
            return cov
        return cls(np.atleast_2d(np.asarray(cov, dtype=float)))


@dataclass(frozen=True)
class HermiteTensor:
    order: int
    values: np.ndarray


def _as_point(cov: Covariance, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[-1] != cov.dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, covariance has {cov.dim}")
    return x


def gaussian_density(cov, x) -> float | np.ndarray:
    """g(Sigma, x) for a single point or an array of points (..., d)."""
    cov = Covariance.of(cov)
    x = _as_point(cov, x)
    u = np.linalg.solve(cov.chol, x[..., None])[..., 0] if x.ndim > 1 else np.linalg.solve(cov.chol, x)
    q = np.sum(u * u, axis=-1)
    val = np.exp(-0.5 * q - 0.5 * cov.logdet - 0.5 * cov.dim * math.log(2 * math.pi))
    return float(val) if np.ndim(val) == 0 else val


def scalar_gaussian(var, x):
    """Vectorized one-dimensional kernel g(var, x); var may be an array."""
    var = np.asarray(var, dtype=float)
    return np.exp(-0.5 * np.square(x) / var) / np.sqrt(2 * math.pi * var)


def hermite(cov, x, order: int) -> HermiteTensor:
    """Hermite tensor H with d^k g / dx^k = H g, for k in {1, 2, 4}."""
    if order not in (1, 2, 4):
        raise ValueError(f"unsupported Hermite order {order}")
    cov = Covariance.of(cov)
    x = _as_point(cov, x)
    if x.ndim != 1:
        raise ValueError("hermite expects a single point")
    u = cov.inv @ x
    P = cov.inv
    if order == 1:
        return HermiteTensor(1, -u)
    if order == 2:
        return HermiteTensor(2, np.outer(u, u) - P)
    d = cov.dim
    uuuu = np.einsum("i,j,k,l->ijkl", u, u, u, u)
    # pairings: one P and two u's (6 terms), two P's (3 terms)
    pu = np.zeros((d,) * 4)
    pp = np.zeros((d,) * 4)
    idx = "ijkl"
    for a, b in itertools.combinations(range(4), 2):
        rest = [c for c in range(4) if c not in (a, b)]
        spec = f"{idx[a]}{idx[b]},{idx[rest[0]]},{idx[rest[1]]}->ijkl"
        pu += np.einsum(spec, P, u, u)
    for (a, b), (c, e) in (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))):
        pp += np.einsum(f"{idx[a]}{idx[b]},{idx[c]}{idx[e]}->ijkl", P, P)
    return HermiteTensor(4, uuuu - pu + pp)


def _fd_tensor(f, x, h, order):
    """Central-difference derivative tensor of a scalar function."""
    d = x.size
    eye = np.eye(d)
    if order == 1:
        return np.array([(f(x + h * eye[i]) - f(x - h * eye[i])) / (2 * h) for i in range(d)])
    if order == 2:
        out = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                ei, ej = h * eye[i], h * eye[j]
                out[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
        return out
    # fourth order: mixed second differences of the second-difference tensor
    out = np.empty((d,) * 4)
    for k in range(d):
        for l in range(d):
            ek, el = h * eye[k], h * eye[l]

            def g2(y, ek=ek, el=el):
                return (f(y + ek + el) - f(y + ek - el) - f(y - ek + el) + f(y - ek - el)) / (4 * h * h)

            out[:, :, k, l] = _fd_tensor(g2, x, h, 2)
    return out


def verify_hermite_identities(cov, x, fd_step: float = 1e-4) -> dict:
    """Max-norm residuals between finite differences of g and H g.

    Orders 1 and 2 use ``fd_step``. A fourth difference at that step would
    be swamped by rounding, so order 4 uses a wider step (at least 2e-2)
    with one Richardson extrapolation.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    cov = Covariance.of(cov)
    x = _as_point(cov, x).astype(float)

    def g(y):
        return gaussian_density(cov, y)

    gx = g(x)
    r1 = np.abs(_fd_tensor(g, x, fd_step, 1) - hermite(cov, x, 1).values * gx).max()
    r2 = np.abs(_fd_tensor(g, x, fd_step, 2) - hermite(cov, x, 2).values * gx).max()
    h4 = max(fd_step, 2e-2) * math.sqrt(float(np.trace(cov.matrix)) / cov.dim)
    coarse = _fd_tensor(g, x, h4, 4)
    fine = _fd_tensor(g, x, h4 / 2, 4)
    d4 = fine + (fine - coarse) / 3.0
    r4 = np.abs(d4 - hermite(cov, x, 4).values * gx).max()
    return {"r1": float(r1), "r2": float(r2), "r4": float(r4)}


def mittag_leffler(alpha: float, beta: float, z: float, full_output: bool = False):
    """E_{alpha,beta}(z) by its power series.

    Terms are formed in log space so large |z| does not overflow. With
    ``full_output`` returns (value, converged, n_terms) instead of raising
    on non-convergence.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    total = 0.0
    logz = math.log(abs(z)) if z != 0 else -math.inf
    converged = False
    n = 0
    for n in range(501):
        if z == 0:
            term = 1.0 / math.gamma(beta) if n == 0 else 0.0
        else:
            arg = alpha * n + beta
            logterm = n * logz - math.lgamma(arg)
            if logterm > 700:
                break  # terms still growing past float range
            term = math.exp(logterm) * special.gammasgn(arg)
            if z < 0 and n % 2:
                term = -term
        total += term
        if n > 0 and abs(term) < 1e-15 * abs(total):
            converged = True
            break
        if z == 0:
            converged = True
            break
    if full_output:
        return total, converged, n + 1
    if not converged:
        raise SeriesNotConverged(f"Mittag-Leffler series did not converge for z={z}", total)
    return total


def beta_product_bound(k: int, eta: float, dt: float, C: float) -> float:
    """C^k dt^{k eta/2} prod_{i=1..k} B(1+(i-1)eta/2, eta/2)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    out = 1.0
    for i in range(1, k + 1):
        out *= C * dt ** (eta / 2) * special.beta(1 + (i - 1) * eta / 2, eta / 2)
    return out


def beta_tail_sum(K: int, eta: float, dt: float, C: float, tol: float = 1e-16) -> float:
    """Sum of beta_product_bound(k) over k > K.

    The ratio of consecutive terms eventually decreases like k^{-eta/2},
    so terms are summed until the running ratio bound closes the remainder
    geometrically.
    """
    total = 0.0
    term = beta_product_bound(K, eta, dt, C)
    k = K
    while True:
        k += 1
        ratio = C * dt ** (eta / 2) * special.beta(1 + (k - 1) * eta / 2, eta / 2)
        term *= ratio
        total += term
        # ratios are decreasing in k, so the rest is below a geometric series
        nxt = C * dt ** (eta / 2) * special.beta(1 + k * eta / 2, eta / 2)
        if nxt < 1 and term * nxt / (1 - nxt) <= tol * max(total, 1e-300):
            return total + term * nxt / (1 - nxt)
        if k > K + 100000:
            warnings.warn("beta tail sum truncated", RuntimeWarning)
            return total


def space_time_constant(p: float, d: int) -> float:
    """Sharp C in |x|^p g(t,x) <= C t^{p/2} g(2t,x)."""
    return (2 * p / math.e) ** (p / 2) * 2 ** (d / 2)
