"""Parametrix construction of the decoupled transition density.

The density of the diffusion with coefficients frozen along a measure flow
is written as the series sum_k (p_hat (x) H^(k)), where p_hat is a Gaussian
with covariance frozen at the terminal point and H is the correction kernel.

Numerically, level k of the series seen from a start point x is tabulated
on scaled coordinates u = sqrt(t - s) (Chebyshev nodes, barycentric
interpolation) and w = (y - c(t)) / u (uniform grid, cubic splines), where
c(t) is the start point transported by the initial drift. The space-time
convolution that produces level k+1 uses the substitution
v = s + (t - s) sin^2(pi theta / 2), which removes the square-root endpoint
behaviour in time, and Gauss-Hermite nodes placed on the Brownian-bridge
envelope between the two endpoints.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline

from .gaussian import beta_tail_sum
from .measures import ParticleCloud
from .model import CoefficientSet

SINGULAR_GAP = 1e-12


class TruncationInsufficient(RuntimeWarning):
    pass


# -- batched Gaussian algebra -------------------------------------------------

def _inv_det(S):
    """Inverse and determinant of a stack of d x d matrices (d <= 2 fast)."""
    d = S.shape[-1]
    if d == 1:
        return 1.0 / S, S[..., 0, 0]
    if d == 2:
        a, b, c, e = S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1]
        det = a * e - b * c
        inv = np.empty_like(S)
        inv[..., 0, 0] = e / det
        inv[..., 1, 1] = a / det
        inv[..., 0, 1] = -b / det
        inv[..., 1, 0] = -c / det
        return inv, det
    return np.linalg.inv(S), np.linalg.det(S)


def _gauss(S, u):
    """g(S, u) with S (..., d, d), u (..., d); returns (g, S^-1 u, S^-1)."""
    inv, det = _inv_det(S)
    if np.any(det <= 0):
        raise ValueError("accumulated covariance is not positive definite")
    su = np.einsum("...ij,...j->...i", inv, u)
    q = np.sum(su * u, axis=-1)
    d = u.shape[-1]
    g = np.exp(-0.5 * q) / np.sqrt((2 * math.pi) ** d * det)
    return g, su, inv


# -- context -------------------------------------------------------------------

class FrozenProxyContext:
    """Coefficients with the law frozen along a flow starting at time s.

    Coefficient evaluations take a time array r of shape G and points of
    shape G + (n, d).
    """

    def __init__(self, coeffs: CoefficientSet, flow=None, s: float = 0.0, T: float | None = None,
                 n_time_nodes: int = 8):
        self.coeffs = coeffs
        self.flow = flow
        self.s = float(s)
        self.d = coeffs.dim
        if coeffs.measure_dependent:
            if flow is None:
                raise ValueError("measure-dependent coefficients need a flow")
            self._times = flow.times
            self._stats = flow.stats(coeffs)
            if self._times[0] > self.s + 1e-12:
                raise ValueError("flow starts after s")
            self.T = float(self._times[-1]) if T is None else float(T)
            if self.T > self._times[-1] + 1e-9:
                raise ValueError("flow does not cover the requested horizon")
        else:
            self._times = None
            self._stats = np.zeros((1, 0))
            self.T = math.inf if T is None else float(T)
        self._gl = np.polynomial.legendre.leggauss(n_time_nodes)
        self.fields: dict = {}
        self.kernel_constant: float | None = None

    # statistics of the flow, linearly interpolated in time
    def stats_at(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        k = self._stats.shape[1]
        if k == 0:
            return np.zeros(r.shape + (0,))
        cols = [np.interp(r, self._times, self._stats[:, j]) for j in range(k)]
        return np.stack(cols, axis=-1)

    def _m(self, r, x):
        return self.stats_at(r)[..., None, :]

    def _t(self, r, x):
        return np.asarray(r, dtype=float)[..., None] * np.ones(x.shape[:-1])

    def b(self, r, x):
        return self.coeffs.drift(self._t(r, x), x, self._m(r, x))

    def a(self, r, x):
        return self.coeffs.a(self._t(r, x), x, self._m(r, x))

    def cov_integral(self, t1, t2, y):
        """int_{t1}^{t2} a(r, y, mu_r) dr for t1, t2 of shape G, y of shape G+(n,d)."""
        t1 = np.asarray(t1, dtype=float)
        t2 = np.asarray(t2, dtype=float)
        span = (t2 - t1)[..., None, None, None]
        if self.coeffs.diffusion_constant:
            a0 = self.coeffs.a(0.0, np.zeros((1, self.d)), np.zeros((1, len(self.coeffs.interaction))))[0]
            return span * np.broadcast_to(a0, y.shape + (self.d,))
        if self.coeffs.diffusion_autonomous:
            return span * self.a(t1, y)
        nodes, weights = self._gl
        out = 0.0
        for xi, wi in zip(nodes, weights):
            r = t1 + (t2 - t1) * (xi + 1) / 2
            out = out + wi * self.a(r, y)
        return 0.5 * span * out

    def a_ref(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, self.d)
        return self.a(np.asarray(self.s), x)[0]


def frozen_gaussian_proxy(ctx: FrozenProxyContext, t1, t2, x, y_freeze, z) -> float:
    """g(int_{t1}^{t2} a(r, y_freeze, mu_r) dr, z - x)."""
    if not (ctx.s - 1e-12 <= t1 < t2):
        raise ValueError("need s <= t1 < t2")
    d = ctx.d
    x, y, z = (np.atleast_1d(np.asarray(v, dtype=float)).reshape(d) for v in (x, y_freeze, z))
    S = ctx.cov_integral(np.asarray(t1), np.asarray(t2), y[None, :])[0]
    g, _, _ = _gauss(S, z - x)
    return float(g)


def kernel_batch(ctx: FrozenProxyContext, r, t, x, y):
    """H(r, t, x, y) with derivatives in the start point x.

    r, t have shape G; x, y have shape G + (n, d) (y may broadcast).
    """
    x = np.asarray(x, dtype=float)
    y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
    S = ctx.cov_integral(r, t, y)
    u = y - x
    g, su, inv = _gauss(S, u)
    bx = ctx.b(r, x)
    first = np.sum(bx * su, axis=-1)
    if ctx.coeffs.diffusion_constant:
        return first * g
    da = ctx.a(r, x) - ctx.a(r, y)
    H2 = su[..., :, None] * su[..., None, :] - inv
    second = 0.5 * np.sum(da * H2, axis=(-1, -2))
    return (first + second) * g


def parametrix_kernel(ctx: FrozenProxyContext, r, t, x, y) -> float:
    """H(r,t,x,y) = sum_i b_i d_{x_i} p_hat + 1/2 sum (a_ij(x) - a_ij(y)) d^2_{x_i x_j} p_hat."""
    if t - r < SINGULAR_GAP:
        raise ValueError("kernel is singular for r >= t")
    if r < ctx.s - 1e-12:
        raise ValueError("r precedes the flow start")
    d = ctx.d
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, d)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, d)
    return float(kernel_batch(ctx, np.asarray(r, dtype=float), np.asarray(t, dtype=float), x, y)[0])


# -- quadrature rules ------------------------------------------------------------

@dataclass(frozen=True)
class TimeRule:
    """Gauss-Jacobi rule in theta for v = s + (t-s) sin^2(pi theta/2).

    The integrand in theta behaves like (1 - theta)^(eta - 1) at the
    terminal end, which is the weight used here.
    """

    n: int = 16
    eta: float = 1.0

    def nodes(self):
        alpha = self.eta - 1.0
        if abs(alpha) < 1e-14:
            x, w = special.roots_legendre(self.n)
            wt = np.ones_like(x)
        else:
            x, w = special.roots_jacobi(self.n, alpha, 0.0)
            wt = (1 - x) ** alpha
        theta = (x + 1) / 2
        # integrand = f * dv/dtheta; the rule integrates f*(1-x)^alpha dx
        return theta, w / wt / 2


@dataclass(frozen=True)
class SpaceRule:
    """Gauss-Hermite nodes per dimension on a Gaussian envelope."""

    n: int = 32
    widen: float = 1.0

    def nodes(self, d: int):
        x, w = special.roots_hermite(self.n)
        w = w * np.exp(x * x)  # integrate f dx, not f e^{-x^2} dx
        xs = np.stack(np.meshgrid(*([x] * d), indexing="ij"), -1).reshape(-1, d)
        ws = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
        return xs, ws


def space_integral(fn, mean, cov, rule: SpaceRule = SpaceRule()):
    """int fn(z) dz using Gauss-Hermite nodes centred on N(mean, cov)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.size
    cov = np.atleast_2d(np.asarray(cov, dtype=float)) * rule.widen**2
    L = np.linalg.cholesky(cov)
    xs, ws = rule.nodes(d)
    z = mean + math.sqrt(2.0) * xs @ L.T
    vals = np.asarray(fn(z))
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite integrand at a quadrature node")
    return float(ws @ vals) * (math.sqrt(2.0) ** d) * abs(np.linalg.det(L))


def spacetime_convolve(f, g, r_lo: float, r_hi: float, time_rule: TimeRule = TimeRule(),
                       space_rule: SpaceRule = SpaceRule(), envelope_var: float = 1.0):
    """Return h(x, y) = int_{r_lo}^{r_hi} int f(r_lo, v, x, z) g(v, r_hi, z, y) dz dv.

    f and g are vectorized kernels k(t1, t2, x, y) taking times of shape G
    and points of shape G + (n, d). The spatial nodes follow the bridge
    envelope between x and y with per-unit-time variance ``envelope_var``.
    """
    if not r_hi > r_lo:
        raise ValueError("need r_hi > r_lo")
    theta, wt = time_rule.nodes()
    span = r_hi - r_lo
    v = r_lo + span * np.sin(np.pi * theta / 2) ** 2
    dv = span * (np.pi / 2) * np.sin(np.pi * theta)

    def h(x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        d = x.size
        xs, ws = space_rule.nodes(d)
        frac = ((v - r_lo) / span)[:, None]
        mean = x[None, :] + frac * (y - x)[None, :]
        var = envelope_var * (v - r_lo) * (r_hi - v) / span * space_rule.widen**2
        sd = np.sqrt(2.0 * var)[:, None, None]
        z = mean[:, None, :] + sd * xs[None, :, :]
        fv = f(np.full(v.shape, r_lo), v, np.broadcast_to(x, z.shape), z)
        gv = g(v, np.full(v.shape, r_hi), z, np.broadcast_to(y, z.shape))
        prod = fv * gv
        if not np.all(np.isfinite(prod)):
            raise FloatingPointError("non-finite integrand at a quadrature node")
        inner = (prod @ ws) * (np.sqrt(2.0 * var) ** d)
        return float(np.sum(wt * dv * inner))

    return h


# -- tabulated series ----------------------------------------------------------------

@dataclass(frozen=True)
class TableGrid:
    n_u: int = 14
    n_w: int = 121
    w_max: float = 9.0


def _cheb_nodes(n, U):
    j = np.arange(n)
    ang = (2 * j + 1) * np.pi / (2 * n)
    return U * (1 + np.cos(ang)) / 2, (-1.0) ** j * np.sin(ang)


def _bary_matrix(u, nodes, weights):
    """Barycentric interpolation weights, rows for each u."""
    u = np.asarray(u, dtype=float)[:, None]
    diff = u - nodes[None, :]
    hit = np.abs(diff) < 1e-15
    diff = np.where(hit, 1.0, diff)
    m = weights[None, :] / diff
    m = m / m.sum(axis=1, keepdims=True)
    rows = hit.any(axis=1)
    if rows.any():
        m[rows] = hit[rows].astype(float)
    return m


@dataclass
class DensityField:
    """Truncated parametrix series p(s, t, x, .) for a fixed start point x.

    ``tables[k]`` holds level k (k >= 1) on the scaled (u, w) grid, scaled
    by u^d; level 0 is the Gaussian proxy and is evaluated in closed form.
    Terms of order k are computed directly from table k - 1.
    """

    ctx: FrozenProxyContext
    x: np.ndarray
    K: int
    t_max: float
    time_rule: TimeRule = field(default_factory=TimeRule)
    space_rule: SpaceRule = field(default_factory=SpaceRule)
    grid: TableGrid = field(default_factory=TableGrid)
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        ctx = self.ctx
        self.d = ctx.d
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float)).reshape(self.d)
        if not self.t_max > ctx.s:
            raise ValueError("t_max must exceed s")
        if self.t_max > ctx.T + 1e-9:
            raise ValueError("t_max beyond the flow horizon")
        self.U = math.sqrt(self.t_max - ctx.s)
        self.u_nodes, self.u_w = _cheb_nodes(self.grid.n_u, self.U)
        self.w_axis = np.linspace(-self.grid.w_max, self.grid.w_max, self.grid.n_w)
        self.b0 = ctx.b(np.asarray(ctx.s), self.x[None, :])[0]
        self.aref = ctx.a_ref(self.x)
        self._theta, self._wt = self.time_rule.nodes()
        self._gh, self._ghw = self.space_rule.nodes(self.d)
        self._splines = {}
        for k in range(1, self.K):
            self._build(k)

    # coordinates
    def center(self, t):
        return self.x + (np.asarray(t, dtype=float) - self.ctx.s)[..., None] * self.b0

    def _grid_points(self, j):
        u = self.u_nodes[j]
        c = self.center(self.ctx.s + u * u)
        if self.d == 1:
            return c + u * self.w_axis[:, None]
        g = np.stack(np.meshgrid(*([self.w_axis] * self.d), indexing="ij"), -1).reshape(-1, self.d)
        return c + u * g

    # level evaluation
    def proxy(self, t, z):
        """Level 0 at times t (shape G) and points z (G + (n, d))."""
        t = np.asarray(t, dtype=float)
        S = self.ctx.cov_integral(np.full(t.shape, self.ctx.s), t, z)
        g, _, _ = _gauss(S, z - self.x)
        return g

    def _level(self, k, t, z):
        """Level k at times t (shape (G,)) and points z (G, n, d)."""
        if k == 0:
            return self.proxy(t, z)
        coef = self._splines[k]
        u = np.sqrt(t - self.ctx.s)
        B = _bary_matrix(u, self.u_nodes, self.u_w)          # (G, n_u)
        w = (z - self.center(t)[:, None, :]) / u[:, None, None]
        if self.d == 1:
            cv = np.einsum("mij,gj->mig", coef, B)             # (4, n_w-1, G)
            h = self.w_axis[1] - self.w_axis[0]
            pos = (w[..., 0] + self.grid.w_max) / h
            idx = np.clip(np.floor(pos).astype(int), 0, self.grid.n_w - 2)
            dx = (pos - idx) * h
            gi = np.arange(t.size)[:, None]
            val = ((cv[0, idx, gi] * dx + cv[1, idx, gi]) * dx + cv[2, idx, gi]) * dx + cv[3, idx, gi]
            val = np.where((pos < 0) | (pos > self.grid.n_w - 1), 0.0, val)
            return val / u[:, None]
        from scipy.ndimage import map_coordinates

        tab = np.einsum("jab,gj->gab", coef, B)
        h = self.w_axis[1] - self.w_axis[0]
        out = np.empty(z.shape[:-1])
        for gi in range(t.size):
            pos = (w[gi] + self.grid.w_max) / h
            out[gi] = map_coordinates(tab[gi], pos.T, order=1, mode="constant", cval=0.0)
        return out / u[:, None] ** self.d

    def _convolve(self, k_prev, t, y):
        """Level k_prev + 1 at the single time t for points y (n, d)."""
        ctx, s, d = self.ctx, self.ctx.s, self.d
        span = t - s
        th, wt = self._theta, self._wt
        v = s + span * np.sin(np.pi * th / 2) ** 2
        dv = span * (np.pi / 2) * np.sin(np.pi * th)
        frac = (v - s) / span
        n_y = y.shape[0]
        # bridge envelope between the transported start and each target point
        c_v = self.center(v)                                        # (n_th, d)
        c_t = self.center(np.asarray(t))
        mean = c_v[:, None, :] + frac[:, None, None] * (y - c_t)[None, :, :]  # (n_th, n_y, d)
        var = (v - s) * (t - v) / span * self.space_rule.widen**2
        Lref = np.linalg.cholesky(self.aref)
        step = math.sqrt(2.0) * np.sqrt(var)[:, None, None] * (self._gh @ Lref.T)[None]  # (n_th, n_gh, d)
        z = mean[:, :, None, :] + step[:, None, :, :]                  # (n_th, n_y, n_gh, d)
        zf = z.reshape(th.size, -1, d)
        prev = self._level(k_prev, v, zf).reshape(th.size, n_y, -1)
        tt = np.full(th.size, t)
        ker = kernel_batch(ctx, v[:, None], tt[:, None], z, y[None, :, None, :])
        vol = (math.sqrt(2.0) ** d) * np.sqrt(var) ** d * abs(np.linalg.det(Lref))
        inner = np.einsum("tyg,g->ty", prev * ker, self._ghw) * vol[:, None]
        return np.einsum("t,ty->y", wt * dv, inner)

    def _build(self, k):
        """Tabulate level k from level k - 1."""
        n_u = self.grid.n_u
        vals = []
        for j in range(n_u):
            u = self.u_nodes[j]
            y = self._grid_points(j)
            vals.append(self._convolve(k - 1, self.ctx.s + u * u, y) * u**self.d)
        F = np.array(vals)                                   # (n_u, n_w^d)
        if not np.all(np.isfinite(F)):
            raise FloatingPointError(f"non-finite values in parametrix level {k}")
        if self.d == 1:
            cs = CubicSpline(self.w_axis, F.T, axis=0, bc_type="natural")
            self._splines[k] = cs.c                           # (4, n_w-1, n_u)
        else:
            n = self.grid.n_w
            self._splines[k] = F.reshape(n_u, n, n)
        self.tables[k] = F

    # public
    def term(self, k: int, t: float, z) -> np.ndarray:
        """k-th series term at time t for points z (n, d)."""
        if k < 0 or k > self.K:
            raise ValueError(f"term order {k} outside 0..{self.K}")
        if not self.ctx.s < t <= self.t_max + 1e-12:
            raise ValueError("t outside (s, t_max]")
        z = np.asarray(z, dtype=float).reshape(-1, self.d)
        if k == 0:
            return self.proxy(np.asarray([t]), z[None])[0]
        return self._convolve(k - 1, t, z)

    def terms(self, t, z, K=None) -> np.ndarray:
        K = self.K if K is None else K
        return np.stack([self.term(k, t, z) for k in range(K + 1)])

    def value(self, t, z, K=None) -> np.ndarray:
        return self.terms(t, z, K).sum(axis=0)


# -- bounds --------------------------------------------------------------------

def envelope(ctx: FrozenProxyContext, t_minus_s, u):
    """Gaussian envelope g(c tau, u) with c = 2 lambda."""
    lam = ctx.coeffs.lambda_ellipticity
    c = 2.0 * lam
    u = np.atleast_2d(np.asarray(u, dtype=float))
    tau = c * t_minus_s
    return np.exp(-0.5 * np.sum(u * u, axis=-1) / tau) / (2 * math.pi * tau) ** (ctx.d / 2)


def proxy_constant(ctx: FrozenProxyContext) -> float:
    lam = ctx.coeffs.lambda_ellipticity
    return lam**ctx.d * 2 ** (ctx.d / 2)


def calibrate_kernel_constant(ctx: FrozenProxyContext, n_w: int = 81, n_tau: int = 6,
                              n_pts: int = 9, margin: float = 1.1, t_hi: float | None = None) -> float:
    """Sampled sup of |H(v,t,z,y)| (t-v)^(1-eta/2) / g(c (t-v), y-z), times a margin."""
    eta = ctx.coeffs.eta
    lam = ctx.coeffs.lambda_ellipticity
    d = ctx.d
    t_hi = min(ctx.T, ctx.s + 1.0) if t_hi is None else t_hi
    lo, hi = ctx.coeffs.box
    zs = np.linspace(lo, hi, n_pts)
    ws = np.linspace(-6, 6, n_w) * math.sqrt(2 * lam)
    best = 0.0
    for tau in np.geomspace(1e-3, t_hi - ctx.s, n_tau) * (1 - 1e-9):
        for v in (ctx.s, 0.5 * (ctx.s + t_hi - tau)):
            t = v + tau
            if t > ctx.T + 1e-12:
                continue
            for z0 in zs:
                z = np.full((ws.size, d), z0)
                y = z.copy()
                y[:, 0] += math.sqrt(tau) * ws
                if d > 1:
                    y[:, 1:] += 0.5 * math.sqrt(tau) * ws[:, None]
                H = kernel_batch(ctx, np.asarray(v), np.asarray(t), z, y)
                env = envelope(ctx, tau, y - z)
                best = max(best, float(np.max(np.abs(H) * tau ** (1 - eta / 2) / env)))
    ctx.kernel_constant = best * margin
    return ctx.kernel_constant


def tail_bound(ctx: FrozenProxyContext, K: int, t_minus_s: float, u) -> np.ndarray:
    """Majorant of the dropped terms k > K at displacement u = z - x."""
    if ctx.kernel_constant is None:
        calibrate_kernel_constant(ctx)
    CH = ctx.kernel_constant
    if CH == 0:
        return np.zeros(np.atleast_2d(u).shape[0])
    total = beta_tail_sum(K, ctx.coeffs.eta, t_minus_s, CH)
    return proxy_constant(ctx) * envelope(ctx, t_minus_s, u) * total


# -- user-facing evaluators ---------------------------------------------------------

def _field(ctx: FrozenProxyContext, x, K: int, t, **kw) -> DensityField:
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(ctx.d)
    t_max = kw.pop("t_max", None)
    if t_max is None:
        t_max = ctx.T if math.isfinite(ctx.T) else float(np.max(t))
    key = (tuple(x.tolist()), t_max, tuple(sorted((k, v) for k, v in kw.items())))
    fld = ctx.fields.get(key)
    if fld is None or fld.K < K:
        fld = DensityField(ctx, x, max(K, 1), t_max, **kw)
        ctx.fields[key] = fld
    return fld


def parametrix_series(ctx: FrozenProxyContext, K: int, x, z, t, cap: float | None = None, **kw):
    """Truncated series at (x, z, t) and the majorant of the dropped tail.

    z may be a single point or an array of points; returns arrays then.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    if not t > ctx.s:
        raise ValueError("need t > s")
    z_arr = np.asarray(z, dtype=float).reshape(-1, ctx.d)
    x_arr = np.atleast_1d(np.asarray(x, dtype=float)).reshape(ctx.d)
    fld = _field(ctx, x_arr, K, t, **kw)
    val = fld.value(t, z_arr, K)
    tb = tail_bound(ctx, K, t - ctx.s, z_arr - x_arr)
    if cap is not None and np.any(tb > cap):
        import warnings

        warnings.warn(f"truncation insufficient: tail bound {tb.max():.3e} exceeds cap {cap}",
                      TruncationInsufficient)
    if np.ndim(z) <= 1 and z_arr.shape[0] == 1:
        return float(val[0]), float(tb[0])
    return val, tb


def _series_value(ctx: FrozenProxyContext, K: int, x, z_arr, t, **kw) -> np.ndarray:
    """Truncated series without the tail majorant."""
    if not t > ctx.s:
        raise ValueError("need t > s")
    x_arr = np.atleast_1d(np.asarray(x, dtype=float)).reshape(ctx.d)
    return _field(ctx, x_arr, K, t, **kw).value(t, z_arr, K)


def mckean_density(ctx: FrozenProxyContext, mu0: ParticleCloud, t, z, K: int, splits: int = 1,
                   stage_spacing: float = 0.5, **kw):
    """p(mu, s, t, z) = int p(mu, s, t, x, z) mu(dx) over the atoms of mu0.

    With ``splits`` > 1 the interval is cut into equal stages and the law
    is carried across them by the Markov property of the decoupled flow:
    at each intermediate time a uniform trapezoid cloud is placed on
    the current law and weighted by the density computed there. Each stage
    then only needs the series over a short interval, where it converges
    much faster when the drift is large.
    """
    z_arr = np.asarray(z, dtype=float).reshape(-1, ctx.d)
    scalar_out = np.ndim(z) <= 1 and z_arr.shape[0] == 1 and ctx.d == np.size(z)
    if splits < 1:
        raise ValueError("splits must be >= 1")
    cloud = mu0
    knots = np.linspace(ctx.s, t, splits + 1)
    for j in range(splits):
        stage = ctx if splits == 1 else _stage_context(ctx, knots[j], knots[j + 1])
        if j < splits - 1:
            cloud = _requadrature(stage, cloud, knots[j + 1], K, stage_spacing, **kw)
            continue
        total = np.zeros(z_arr.shape[0])
        for w, x in zip(cloud.w(), cloud.points):
            if w == 0:
                continue
            total += w * _series_value(stage, K, x, z_arr, knots[j + 1], **kw)
    return float(total[0]) if scalar_out else total


def _stage_context(ctx: FrozenProxyContext, s, T) -> FrozenProxyContext:
    key = ("stage", float(s), float(T))
    sub = ctx.fields.get(key)
    if sub is None:
        sub = FrozenProxyContext(ctx.coeffs, ctx.flow, s=s, T=T)
        sub.kernel_constant = ctx.kernel_constant
        ctx.fields[key] = sub
    return sub


def _requadrature(stage: FrozenProxyContext, cloud: ParticleCloud, t, K, spacing, width=7.0,
                  **kw) -> ParticleCloud:
    """Trapezoid cloud for the law at time t started from ``cloud``.

    Nodes form a uniform grid over mean +- width sd with spacing
    ``spacing`` sqrt((t - s) / lambda), fine enough to resolve the
    transition kernel of the next stage.
    """
    d = stage.d
    tau = t - stage.s
    pts, w = cloud.points, cloud.w()
    moved = pts + tau * stage.b(np.asarray(stage.s), pts[None])[0]
    mean = w @ moved
    cov = (moved - mean).T @ ((moved - mean) * w[:, None]) + tau * np.einsum(
        "n,nij->ij", w, stage.a(np.asarray(stage.s), pts[None])[0])
    sd = np.sqrt(np.diag(cov))
    h = spacing * math.sqrt(tau / stage.coeffs.lambda_ellipticity)
    axes = [np.arange(m - width * s_, m + width * s_ + h, h) for m, s_ in zip(mean, sd)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    dens = np.zeros(nodes.shape[0])
    for wi, x in zip(w, pts):
        if wi == 0:
            continue
        dens += wi * _series_value(stage, K, x, nodes, t, **kw)
    weights = np.clip(dens, 0.0, None)
    return ParticleCloud(nodes, weights / weights.sum())


def fast_rules() -> dict:
    """Coarser rules for heavy oracles; about five times cheaper."""
    return dict(grid=TableGrid(14, 121, 9.0), space_rule=SpaceRule(20), time_rule=TimeRule(12))


def grid_quadrature(pdf, lo, hi, h) -> ParticleCloud:
    """Trapezoid cloud for a smooth one-dimensional density."""
    nodes = np.arange(lo, hi + 0.5 * h, h)
    w = np.asarray(pdf(nodes), dtype=float)
    return ParticleCloud(nodes[:, None], w / w.sum())


def density_tail_bound(ctx: FrozenProxyContext, mu0: ParticleCloud, t, z, K: int):
    z_arr = np.asarray(z, dtype=float).reshape(-1, ctx.d)
    tb = np.zeros(z_arr.shape[0])
    for w, x in zip(mu0.w(), mu0.points):
        tb += w * tail_bound(ctx, K, t - ctx.s, z_arr - x)
    return tb


def export_density_csv(path, ctx: FrozenProxyContext, xs, zs, t, K: int, **kw):
    """Write (x, z, value, tail_bound) rows for d = 1."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "z", "value", "tail_bound"])
        for x in xs:
            vals, tb = parametrix_series(ctx, K, x, np.asarray(zs, dtype=float).reshape(-1, 1), t, **kw)
            for zz, v, b in zip(np.ravel(zs), vals, tb):
                wr.writerow([repr(float(x)), repr(float(zz)), repr(float(v)), repr(float(b))])


@dataclass
class BoundCheck:
    C: float
    violations: int
    n_samples: int
    max_ratio: float


def gaussian_bound_check(ctx: FrozenProxyContext, K: int, xs, n_samples: int = 1000, seed: int = 0,
                         t_min: float = 0.05, w_max: float = 4.0, margin: float = 1.1,
                         prescan=(5, 25), **kw) -> BoundCheck:
    """Calibrate C on a coarse pre-scan, then count violations of
    |p(x,z,t)| <= C g(c (t-s), z - x) at random samples.

    Start points are drawn from the finite set ``xs`` so that each needs
    only one set of tables.
    """
    xs = [np.atleast_1d(np.asarray(x, dtype=float)) for x in xs]
    t_hi = ctx.T if math.isfinite(ctx.T) else ctx.s + 1.0
    lam = ctx.coeffs.lambda_ellipticity
    scale = math.sqrt(lam)

    def ratio(x, t, z):
        v, _ = parametrix_series(ctx, K, x, z, t, t_max=t_hi, **kw)
        return np.abs(np.atleast_1d(v)) / envelope(ctx, t - ctx.s, z - x)

    C = 0.0
    for x in xs:
        for t in np.linspace(ctx.s + t_min, t_hi, prescan[0]):
            w = np.linspace(-w_max, w_max, prescan[1])
            z = x[None, :] + scale * math.sqrt(t - ctx.s) * w[:, None]
            C = max(C, float(ratio(x, t, z).max()))
    C *= margin
    rng = np.random.default_rng(seed)
    viol, worst = 0, 0.0
    which = rng.integers(0, len(xs), n_samples)
    ts = rng.uniform(ctx.s + t_min, t_hi, n_samples)
    ws = rng.uniform(-w_max, w_max, (n_samples, ctx.d))
    for i in range(n_samples):
        x, t = xs[which[i]], ts[i]
        z = x[None, :] + scale * math.sqrt(t - ctx.s) * ws[i][None, :]
        r = float(ratio(x, t, z)[0])
        worst = max(worst, r)
        viol += r > C
    return BoundCheck(C, int(viol), n_samples, worst)


# -- densities as functions of the initial law ------------------------------------

@dataclass
class FlowBuilder:
    """Picard flows started from a small weighted cloud at time s.

    Each atom is replicated so the reference holds about M particles. The
    number of Picard sweeps is fixed rather than tolerance driven, which
    keeps the flow a smooth function of the atoms and their weights (finite
    differences with common random numbers rely on this).
    """

    coeffs: CoefficientSet
    M: int = 4096
    dt: float = 1e-2
    seed: int = 0
    sweeps: int = 6

    def __call__(self, cloud: ParticleCloud, s: float, T: float):
        if not self.coeffs.measure_dependent:
            return None
        from .simulator import InitSpec, SimConfig, picard_mean_field_flow

        steps = max(1, math.ceil((T - s) / self.dt - 1e-9))
        r = max(2, self.M // cloud.size)
        r += r % 2
        x0 = np.tile(cloud.points, (r, 1))
        w = np.tile(cloud.w(), r) / r
        cfg = SimConfig(N=x0.shape[0], dt=(T - s) / steps, T=T - s, seed=self.seed, waive_ellipticity=True)
        return picard_mean_field_flow(self.coeffs, InitSpec(), cfg, tol=0.0, max_iter=self.sweeps,
                                      t0=s, x0=x0, weights=w)


def density_of_law(coeffs: CoefficientSet, cloud: ParticleCloud, s: float, t: float, z, K: int,
                   builder: FlowBuilder | None = None, flow_cloud: ParticleCloud | None = None, **kw):
    """p(mu, s, t, z) with the flow rebuilt from mu = ``cloud`` at time s.

    ``flow_cloud`` lets the flow be driven by a different law than the one
    integrated against (used for directional derivatives of the decoupled
    density).
    """
    builder = builder or FlowBuilder(coeffs)
    flow = builder(cloud if flow_cloud is None else flow_cloud, s, t)
    ctx = FrozenProxyContext(coeffs, flow, s=s, T=t)
    return np.atleast_1d(mckean_density(ctx, cloud, t, z, K, **kw))


@dataclass
class ResidualReport:
    z: np.ndarray
    residual: np.ndarray
    time_term: np.ndarray
    space_term: np.ndarray
    fd: tuple
    underflow: bool

    @property
    def value(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def to_text(self) -> str:
        lines = [f"max_abs_residual: {self.value!r}", f"fd_time: {self.fd[0]!r}", f"fd_space: {self.fd[1]!r}",
                 f"underflow: {str(self.underflow).lower()}", f"points: {self.z.shape[0]}"]
        for zi, r in zip(self.z, self.residual):
            lines.append(f"residual[{', '.join(repr(float(c)) for c in zi)}]: {float(r)!r}")
        return "\n".join(lines) + "\n"


def _noise_floor(vals) -> float:
    return 64 * np.finfo(float).eps * max(1e-300, float(np.max(np.abs(vals))))


def kolmogorov_residual(ctx: FrozenProxyContext, mu0: ParticleCloud, t, z, fd=(1e-3, 1e-3), K: int = 6,
                        builder: FlowBuilder | None = None, **kw) -> ResidualReport:
    """(d/ds + L_s) p(mu, s, t, z) at mu = mu0, s = ctx.s, by finite differences.

    The measure derivatives come from the map (x_1..x_n) -> p(m_x, s, t, z)
    (empirical projection): for atom i of weight w_i,
        grad_i = w_i d_mu p(x_i),
        hess_ii = w_i d_v d_mu p(x_i) + w_i^2 d2_mu p(x_i, x_i).
    The last term vanishes for measure-independent coefficients; otherwise
    it is recovered by splitting atom i into two half-weight copies and
    taking the mixed difference in their positions.
    """
    coeffs = ctx.coeffs
    if mu0.size > 64:
        raise ValueError("kolmogorov_residual expects at most 64 atoms")
    ht, hx = map(float, fd)
    if ht <= 0 or hx <= 0:
        raise ValueError("fd steps must be positive")
    s, d = ctx.s, ctx.d
    z_arr = np.asarray(z, dtype=float).reshape(-1, d)
    builder = builder or FlowBuilder(coeffs)
    pts, w = mu0.points, mu0.w()

    def U(points, weights=w, s_=s):
        return density_of_law(coeffs, ParticleCloud(points, weights), s_, t, z_arr, K, builder, **kw)

    U0 = U(pts)
    up, dn = U(pts, s_=s + ht), U(pts, s_=s - ht)
    underflow = bool(np.all(np.abs(up - dn) < _noise_floor(U0)))
    dS = (up - dn) / (2 * ht)

    m = coeffs.statistics(pts, w)
    b = coeffs.drift(np.full(pts.shape[0], s), pts, m)
    a = coeffs.a(np.full(pts.shape[0], s), pts, m)
    space = np.zeros_like(U0)
    for i in range(pts.shape[0]):
        grad = np.zeros((d,) + U0.shape)
        hess = np.zeros((d, d) + U0.shape)
        for j in range(d):
            e = np.zeros_like(pts)
            e[i, j] = hx
            Up, Um = U(pts + e), U(pts - e)
            grad[j] = (Up - Um) / (2 * hx)
            hess[j, j] = (Up - 2 * U0 + Um) / hx**2
            for k in range(j):
                f = np.zeros_like(pts)
                f[i, k] = hx
                mixed = (U(pts + e + f) - U(pts + e - f) - U(pts - e + f) + U(pts - e - f)) / (4 * hx * hx)
                hess[j, k] = hess[k, j] = mixed
        if coeffs.measure_dependent:
            hess = hess - w[i] ** 2 * _diagonal_second_lions(U, pts, w, i, hx)
        space += np.einsum("j,j...->...", b[i], grad) + 0.5 * np.einsum("jk,jk...->...", a[i], hess)
    return ResidualReport(z_arr, dS + space, dS, space, (ht, hx), underflow)


def _diagonal_second_lions(U, pts, w, i, hx):
    """d2_mu p(x_i, x_i), shape (d, d, n_z), from a split atom."""
    d = pts.shape[1]
    split = np.vstack([pts, pts[i:i + 1]])
    ws = np.append(w, 0.5 * w[i])
    ws[i] = 0.5 * w[i]
    n = pts.shape[0]
    out = None
    for j in range(d):
        for k in range(d):
            def at(sa, sb):
                q = split.copy()
                q[i, j] += sa * hx
                q[n, k] += sb * hx
                return U(q, ws)
            mixed = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * hx * hx)
            if out is None:
                out = np.zeros((d, d) + mixed.shape)
            out[j, k] = mixed / (ws[i] * ws[n])
    return out
