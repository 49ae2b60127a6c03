"""Euler-Maruyama particle systems, the Picard mean-field flow and the
synchronous coupling with mean-field copies."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import noise
from .measures import ParticleCloud, QuantileBlocks, wasserstein2
from .model import CoefficientSet, check_ellipticity


class BlowUp(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    N: int
    dt: float
    T: float
    seed: int = 0
    waive_ellipticity: bool = False

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("dt and T must be positive")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if abs(self.steps * self.dt - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError(f"T={self.T} is not a whole number of steps of dt={self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def times(self, s: float = 0.0) -> np.ndarray:
        return s + self.dt * np.arange(self.steps + 1)


@dataclass(frozen=True)
class InitSpec:
    """Initial law: point, gaussian, rademacher, uniform or atoms."""

    kind: str = "gaussian"
    loc: float = 0.0
    scale: float = 1.0
    atoms: tuple | None = None
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "rademacher", "uniform", "atoms"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == "atoms" and not self.atoms:
            raise ValueError("atoms law needs atoms")

    @property
    def symmetric(self) -> bool:
        return self.kind != "atoms"

    def sample(self, gen: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "point":
            return np.full(shape, float(self.loc))
        if self.kind == "gaussian":
            return self.loc + self.scale * gen.standard_normal(shape)
        if self.kind == "rademacher":
            return self.loc + self.scale * np.where(gen.random(shape) < 0.5, -1.0, 1.0)
        if self.kind == "uniform":
            return self.loc + self.scale * (2.0 * gen.random(shape) - 1.0)
        cloud = self.cloud()
        idx = gen.choice(cloud.size, size=shape[:-1], p=cloud.w())
        return cloud.points[idx]

    def reflect(self, x):
        return 2.0 * self.loc - x

    def cloud(self) -> ParticleCloud:
        pts = np.asarray(self.atoms, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return ParticleCloud(pts, None if self.weights is None else np.asarray(self.weights, dtype=float))

    def quadrature(self, d: int = 1, n: int = 24) -> ParticleCloud:
        """Weighted cloud integrating smooth functions against the law."""
        if self.kind == "point":
            return ParticleCloud(np.full((1, d), float(self.loc)))
        if self.kind == "atoms":
            return self.cloud()
        if self.kind == "rademacher":
            nodes, w = np.array([-1.0, 1.0]), np.array([0.5, 0.5])
        elif self.kind == "gaussian":
            nodes, w = np.polynomial.hermite_e.hermegauss(n)
            w = w / w.sum()
        else:
            nodes, w = np.polynomial.legendre.leggauss(n)
            w = w / w.sum()
        grids = np.stack(np.meshgrid(*([nodes] * d), indexing="ij"), -1).reshape(-1, d)
        ws = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
        return ParticleCloud(self.loc + self.scale * grids, ws / ws.sum())


@dataclass
class MeasureFlow:
    """Clouds on a uniform time grid; points has shape (K+1, M, d)."""

    times: np.ndarray
    points: np.ndarray
    weights: np.ndarray | None = None
    gaps: list = field(default_factory=list)
    converged: bool = True

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.points.shape[0] != self.times.size:
            raise ValueError("one cloud per grid time required")
        if self.times.size > 1:
            dts = np.diff(self.times)
            if np.any(dts <= 0) or np.ptp(dts) > 1e-9 * dts.mean():
                raise ValueError("flow times must be a uniform increasing grid")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def clouds(self):
        return [self.cloud(k) for k in range(self.times.size)]

    def cloud(self, k: int) -> ParticleCloud:
        return ParticleCloud(self.points[k], self.weights)

    def stats(self, coeffs: CoefficientSet) -> np.ndarray:
        """Interaction statistics on the grid, shape (K+1, k)."""
        return coeffs.statistics(self.points, None if self.weights is None
                                 else np.broadcast_to(self.weights, self.points.shape[:2]))[:, 0, :]

    @classmethod
    def constant(cls, times, cloud: ParticleCloud) -> "MeasureFlow":
        pts = np.broadcast_to(cloud.points, (len(times),) + cloud.points.shape)
        return cls(np.asarray(times), pts, cloud.weights)

    def to_csv(self, directory, every: int = 1):
        """One CSV per stored grid time plus an index file."""
        import os

        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "manifest.txt"), "w") as fh:
            for k in range(0, self.times.size, every):
                name = f"cloud_{k:06d}.csv"
                self.cloud(k).to_csv(os.path.join(directory, name))
                fh.write(f"{k}: t={self.times[k]!r} file={name}\n")


@dataclass
class TrajectoryBundle:
    particle_paths: np.ndarray
    coupled_paths: np.ndarray | None
    noise_seed: int

    def save(self, path):
        arrs = {"particle_paths": self.particle_paths, "noise_seed": np.array(self.noise_seed)}
        if self.coupled_paths is not None:
            arrs["coupled_paths"] = self.coupled_paths
        np.savez(path, **arrs)


# -- stepping kernel ---------------------------------------------------------

def _increment(coeffs: CoefficientSet, t, x, m, dW, dt, sqdt):
    b = coeffs.drift(t, x, m)
    s = coeffs.diffusion(t, x, m)
    if coeffs.dim == 1 and coeffs.noise_dim == 1:
        return b * dt + s[..., 0] * dW * sqdt
    return b * dt + np.einsum("...ij,...j->...i", s, dW) * sqdt


def run_block(coeffs: CoefficientSet, x0: np.ndarray, cfg: SimConfig, noise_fn, *,
              frozen_stats=None, couple_stats=None, observer=None, record=False, weights=None,
              t0: float = 0.0):
    """Advance one block of systems x0 (R, N, d) over the grid.

    ``frozen_stats`` (K+1, k) replaces the empirical statistics of the main
    system; ``couple_stats`` additionally advances mean-field copies with
    the same noise. ``observer(step, x, xbar)`` sees every grid time.
    Returns (x_T, xbar_T, paths, coupled_paths).
    """
    x = np.array(x0, dtype=float)
    xbar = x.copy() if couple_stats is not None else None
    dt, sqdt = cfg.dt, math.sqrt(cfg.dt)
    K = cfg.steps
    paths = cpaths = None
    if record:
        paths = np.empty((K + 1,) + x.shape)
        paths[0] = x
        if xbar is not None:
            cpaths = np.empty_like(paths)
            cpaths[0] = xbar
    if observer is not None:
        observer(0, x, xbar)
    for k in range(K):
        t = t0 + k * dt
        dW = noise_fn(k)
        if frozen_stats is not None:
            m = frozen_stats[k][None, None, :]
        else:
            m = coeffs.statistics(x, weights)
        x = x + _increment(coeffs, t, x, m, dW, dt, sqdt)
        if xbar is not None:
            mb = couple_stats[k][None, None, :]
            xbar = xbar + _increment(coeffs, t, xbar, mb, dW, dt, sqdt)
        if not math.isfinite(float(x.sum())):
            raise BlowUp(k + 1)
        if record:
            paths[k + 1] = x
            if xbar is not None:
                cpaths[k + 1] = xbar
        if observer is not None:
            observer(k + 1, x, xbar)
    return x, xbar, paths, cpaths


def initial_block(init: InitSpec, seed, block, n_rep, N, d, antithetic=None, role=noise.ROLE_INIT):
    gen = noise.Stream(seed, role).generator(block, 0)
    if antithetic is None:
        return init.sample(gen, (n_rep, N, d))
    if not init.symmetric:
        raise ValueError("antithetic sampling needs a symmetric initial law")
    ax = {"replications": 0, "particles": 1}[antithetic]
    shape = [n_rep, N, d]
    shape[ax] //= 2
    half = init.sample(gen, tuple(shape))
    return np.concatenate([half, init.reflect(half)], axis=ax)


def _require_elliptic(coeffs, cfg):
    if not cfg.waive_ellipticity and not check_ellipticity(coeffs).passed:
        raise ValueError(f"model {coeffs.name!r} fails the ellipticity check; waive it explicitly")


def simulate_particle_system(coeffs: CoefficientSet, init: InitSpec, cfg: SimConfig, R: int = 1,
                             record: bool = True, antithetic=None):
    """Simulate R independent N-particle systems.

    Returns (TrajectoryBundle, MeasureFlow). With R = 1 the bundle holds
    paths of shape (N, steps+1, d) and the flow holds the empirical
    measures; with R > 1 paths gain a leading replication axis and the
    flow is that of the first replication.
    """
    _require_elliptic(coeffs, cfg)
    outs = []
    for blk, start, cnt in noise.block_layout(R, cfg.N, antithetic == "replications"):
        x0 = initial_block(init, cfg.seed, blk, cnt, cfg.N, coeffs.dim, antithetic)
        nf = noise.BlockNoise(cfg.seed, noise.ROLE_PARTICLES, blk, (cnt, cfg.N, coeffs.noise_dim), antithetic)
        outs.append(run_block(coeffs, x0, cfg, nf, record=True))
    paths = np.concatenate([o[2] for o in outs], axis=1)  # (K+1, R, N, d)
    paths = np.moveaxis(paths, 0, 2)                       # (R, N, K+1, d)
    flow = MeasureFlow(cfg.times(), np.moveaxis(paths[0], 1, 0))
    if R == 1:
        paths = paths[0]
    return TrajectoryBundle(paths if record else paths[..., -1:, :], None, cfg.seed), flow


def _flow_gap(prev: np.ndarray, cur: np.ndarray, weights=None) -> float:
    """sup over grid times of W2 between two flows on shared particles."""
    if prev.shape[-1] == 1:
        if weights is None:
            a = np.sort(prev[..., 0], axis=1)
            b = np.sort(cur[..., 0], axis=1)
            return float(np.sqrt(np.mean((a - b) ** 2, axis=1)).max())
        return max(wasserstein2(ParticleCloud(p, weights), ParticleCloud(c, weights), "exact1d")
                   for p, c in zip(prev, cur))
    # identity coupling bounds W2 from above in higher dimension
    sq = np.sum((prev - cur) ** 2, axis=-1)
    w = np.full(prev.shape[1], 1.0 / prev.shape[1]) if weights is None else weights
    return float(np.sqrt(sq @ w).max())


def picard_mean_field_flow(coeffs: CoefficientSet, init: InitSpec, cfg: SimConfig, tol: float = 1e-3,
                           max_iter: int = 20, antithetic: bool = True, t0: float = 0.0,
                           x0: np.ndarray | None = None, weights=None, raise_on_failure=False) -> MeasureFlow:
    """Fixed point of the frozen-law map with common random numbers.

    The seed flow is the system simulated with the law frozen at its
    initial value; each further iteration re-simulates with coefficients
    evaluated on the previous flow. ``cfg.N`` is the reference size M.
    ``x0`` (M, d) with optional ``weights`` replaces sampling from init.
    """
    _require_elliptic(coeffs, cfg)
    M, d = cfg.N, coeffs.dim
    anti = "particles" if antithetic else None
    if x0 is None:
        x0 = initial_block(init, cfg.seed, 0, 1, M, d, anti, role=noise.ROLE_INIT_REFERENCE)[0]
    x0 = np.asarray(x0, dtype=float).reshape(-1, d)
    M = x0.shape[0]
    nf = noise.BlockNoise(cfg.seed, noise.ROLE_REFERENCE, 0, (M, coeffs.noise_dim),
                          None if not antithetic or M % 2 else "replications")
    times = cfg.times(t0)

    def sweep(stats):
        store = np.empty((cfg.steps + 1, M, d))

        def obs(k, x, _):
            store[k] = x[0]

        run_block(coeffs, x0[None], cfg, lambda k: nf(k)[None], frozen_stats=stats, observer=obs, t0=t0)
        return store

    w = None if weights is None else np.asarray(weights, dtype=float)
    s0 = coeffs.statistics(x0, w)[0]
    prev = sweep(np.tile(s0, (cfg.steps + 1, 1)))
    gaps = []
    converged = False
    for _ in range(max_iter):
        stats = coeffs.statistics(prev, None if w is None else np.broadcast_to(w, prev.shape[:2]))[:, 0, :]
        cur = sweep(stats)
        gaps.append(_flow_gap(prev, cur, w))
        prev = cur
        if gaps[-1] < tol:
            converged = True
            break
    if not converged and raise_on_failure:
        raise RuntimeError(f"Picard iteration did not converge; last gap {gaps[-1]:.3e}")
    return MeasureFlow(times, prev, w, gaps=gaps, converged=converged)


def _check_grid(flow: MeasureFlow, cfg: SimConfig, t0=0.0):
    if flow.times.size != cfg.steps + 1 or abs(flow.dt - cfg.dt) > 1e-12 or abs(flow.times[0] - t0) > 1e-12:
        raise ValueError("mean-field flow grid does not match the simulation grid")


def simulate_coupled_system(coeffs: CoefficientSet, init: InitSpec, cfg: SimConfig, mean_field_flow: MeasureFlow,
                            R: int = 1, antithetic=None, noise_permutation=None) -> TrajectoryBundle:
    """Particle system and mean-field copies driven by identical noise.

    ``noise_permutation`` relabels particle streams (a permutation of
    range(N)); used to check exchangeability.
    """
    _check_grid(mean_field_flow, cfg)
    _require_elliptic(coeffs, cfg)
    cstats = mean_field_flow.stats(coeffs)
    P, C = [], []
    for blk, start, cnt in noise.block_layout(R, cfg.N, antithetic == "replications"):
        x0 = initial_block(init, cfg.seed, blk, cnt, cfg.N, coeffs.dim, antithetic)
        nf = noise.BlockNoise(cfg.seed, noise.ROLE_PARTICLES, blk, (cnt, cfg.N, coeffs.noise_dim), antithetic)
        if noise_permutation is not None:
            perm = np.asarray(noise_permutation)
            x0 = x0[:, perm]
            base = nf
            nf = lambda k, base=base: base(k)[:, perm]  # noqa: E731
        _, _, p, c = run_block(coeffs, x0, cfg, nf, couple_stats=cstats, record=True)
        P.append(p)
        C.append(c)
    paths = np.moveaxis(np.concatenate(P, axis=1), 0, 2)
    cpaths = np.moveaxis(np.concatenate(C, axis=1), 0, 2)
    if R == 1:
        paths, cpaths = paths[0], cpaths[0]
    return TrajectoryBundle(paths, cpaths, cfg.seed)


def path_chaos_statistics(bundle: TrajectoryBundle, mean_field_flow: MeasureFlow) -> dict:
    """sup_t mean_i |X^i - Xbar^i|^2 and sup_t W2^2(mu^N_t, mu_t) for one system."""
    X, Xb = bundle.particle_paths, bundle.coupled_paths
    if X.ndim != 3 or Xb is None or Xb.shape != X.shape:
        raise ValueError("need one replication with coupled paths of matching shape")
    N, K1, d = X.shape
    if K1 != mean_field_flow.times.size:
        raise ValueError("paths and flow have different grids")
    path_prof = np.mean(np.sum((X - Xb) ** 2, axis=-1), axis=0)
    w2_prof = np.empty(K1)
    for k in range(K1):
        emp = ParticleCloud(X[:, k, :])
        if d == 1:
            w2_prof[k] = wasserstein2(emp, mean_field_flow.cloud(k), "exact1d") ** 2
        else:
            ref = ParticleCloud(mean_field_flow.points[k, :N])
            w2_prof[k] = wasserstein2(emp, ref, "assignment") ** 2
    return {
        "sup_path": float(path_prof.max()),
        "sup_w2": float(w2_prof.max()),
        "path_profile": path_prof,
        "w2_profile": w2_prof,
        "times": mean_field_flow.times.copy(),
    }


def parallel_map(fn, items, threads: int = 1):
    """Ordered map; threads only change the schedule, never the result."""
    items = list(items)
    if threads == 0:
        import os

        threads = os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


__all__ = [
    "SimConfig", "InitSpec", "MeasureFlow", "TrajectoryBundle", "BlowUp",
    "simulate_particle_system", "picard_mean_field_flow", "simulate_coupled_system",
    "path_chaos_statistics", "run_block", "initial_block", "parallel_map", "QuantileBlocks",
]
