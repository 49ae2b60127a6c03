"""Empirical measures, moments and Wasserstein-2 distances."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

ASSIGNMENT_CAP = 512


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted point cloud; ``weights`` is None for the uniform case."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("cloud needs an (N, d) array with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape[0] != pts.shape[0] or np.any(w < 0):
                raise ValueError("weights must be nonnegative with one entry per point")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights sum to {w.sum()!r}, not 1")
            object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def uniform(self) -> bool:
        return self.weights is None

    def w(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def integrate(self, fn) -> np.ndarray:
        """Weighted average of fn(points) over the first axis."""
        vals = np.asarray(fn(self.points))
        return np.tensordot(self.w(), vals, axes=(0, 0))

    def mean(self) -> np.ndarray:
        return self.w() @ self.points

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            head = [f"x{j + 1}" for j in range(self.dim)]
            if self.weights is not None:
                head.append("w")
            wr.writerow(head)
            for i in range(self.size):
                row = [repr(float(v)) for v in self.points[i]]
                if self.weights is not None:
                    row.append(repr(float(self.weights[i])))
                wr.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "ParticleCloud":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=float)
        if head[-1] == "w":
            return cls(body[:, :-1], body[:, -1])
        return cls(body)


@dataclass
class RateTable:
    """(N, error, stderr) rows with an optional per-row flag."""

    N: list = field(default_factory=list)
    error: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    flag: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.flag:
            self.flag = [""] * len(self.N)
        self.validate()

    def validate(self):
        if not (len(self.N) == len(self.error) == len(self.stderr) == len(self.flag)):
            raise ValueError("rate table columns have different lengths")
        if any(b <= a for a, b in zip(self.N, self.N[1:])):
            raise ValueError("N must be strictly increasing")
        if not all(math.isfinite(e) for e in self.error):
            raise ValueError("rate table has non-finite errors")

    def add(self, N, error, stderr, flag=""):
        if self.N and int(N) <= self.N[-1]:
            raise ValueError("N must be strictly increasing")
        if not math.isfinite(float(error)):
            raise ValueError("rate table has non-finite errors")
        self.N.append(int(N))
        self.error.append(float(error))
        self.stderr.append(float(stderr))
        self.flag.append(flag)

    def usable(self):
        return [i for i, f in enumerate(self.flag) if not f]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["N", "error", "stderr", "flag"])
            for row in zip(self.N, self.error, self.stderr, self.flag):
                wr.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])

    @classmethod
    def from_csv(cls, path, meta=None) -> "RateTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            N=[int(r["N"]) for r in rows],
            error=[float(r["error"]) for r in rows],
            stderr=[float(r["stderr"]) for r in rows],
            flag=[r.get("flag") or "" for r in rows],
            meta=dict(meta or {}),
        )


def moment(cloud: ParticleCloud, q: float) -> float:
    """M_q = (int |x|^q dmu)^{1/q}."""
    if q <= 0:
        raise ValueError("q must be positive")
    r = np.linalg.norm(cloud.points, axis=1)
    scale = r.max()
    if scale == 0:
        return 0.0
    # rescale to avoid overflow for large q
    return float(scale * (cloud.w() @ (r / scale) ** q) ** (1.0 / q))


def _w2sq_1d(x, wx, y, wy) -> float:
    """Squared W2 between weighted 1D atoms via merged quantile functions."""
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    cx = np.cumsum(wx[ix])
    cy = np.cumsum(wy[iy])
    cx[-1] = cy[-1] = 1.0
    brk = np.union1d(cx, cy)
    lo = np.concatenate(([0.0], brk[:-1]))
    length = brk - lo
    keep = length > 0
    mid = 0.5 * (lo + brk)[keep]
    qx = xs[np.minimum(np.searchsorted(cx, mid), xs.size - 1)]
    qy = ys[np.minimum(np.searchsorted(cy, mid), ys.size - 1)]
    return float(np.sum(length[keep] * (qx - qy) ** 2))


def wasserstein2(a: ParticleCloud, b: ParticleCloud, method: str = "auto") -> float:
    """Wasserstein-2 distance between two clouds."""
    if a.dim != b.dim:
        raise ValueError("clouds have different dimensions")
    if method == "auto":
        if a.dim == 1:
            method = "exact1d"
        elif a.size == b.size and a.uniform and b.uniform and a.size <= ASSIGNMENT_CAP:
            method = "assignment"
        else:
            raise ValueError("no exact method for this shape; use sliced_wasserstein2")
    if method == "exact1d":
        if a.dim != 1:
            raise ValueError("exact1d requires d=1")
        if a.size == b.size and a.uniform and b.uniform:
            d2 = np.mean((np.sort(a.points[:, 0]) - np.sort(b.points[:, 0])) ** 2)
            return math.sqrt(d2)
        return math.sqrt(_w2sq_1d(a.points[:, 0], a.w(), b.points[:, 0], b.w()))
    if method == "assignment":
        if a.size != b.size:
            raise ValueError("assignment needs equal sizes")
        if not (a.uniform and b.uniform):
            raise ValueError("assignment needs uniform weights")
        if a.size > ASSIGNMENT_CAP:
            raise ValueError(f"assignment capped at N={ASSIGNMENT_CAP}")
        cost = np.sum((a.points[:, None, :] - b.points[None, :, :]) ** 2, axis=-1)
        r, c = linear_sum_assignment(cost)
        return math.sqrt(cost[r, c].mean())
    raise ValueError(f"unknown method {method!r}")


def sliced_wasserstein2(a: ParticleCloud, b: ParticleCloud, n_proj: int = 256, seed=0,
                        return_stderr: bool = False):
    """Root-mean-square of 1D W2 along random unit directions."""
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    if a.dim != b.dim:
        raise ValueError("clouds have different dimensions")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((n_proj, a.dim))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    pa, pb = a.points @ theta.T, b.points @ theta.T
    sq = np.array([_w2sq_1d(pa[:, j], a.w(), pb[:, j], b.w()) for j in range(n_proj)])
    val = math.sqrt(sq.mean())
    if not return_stderr:
        return val
    se_sq = sq.std(ddof=1) / math.sqrt(n_proj) if n_proj > 1 else math.inf
    return val, (se_sq / (2 * val) if val > 0 else 0.0)


def fournier_guillin_rate(d: int, N: int) -> float:
    """Rate of E W2^2 between an empirical measure of N draws and its law."""
    if d < 1 or N < 1:
        raise ValueError("d and N must be positive")
    if d < 4:
        return N ** -0.5
    if d == 4:
        return N ** -0.5 * math.log(1 + N)
    return N ** (-2.0 / d)


class QuantileBlocks:
    """Block statistics of a fixed reference cloud in d=1.

    For a uniform cloud of size N matched against the reference, W2^2 is
    (1/N) sum_i [(x_(i) - m_i)^2 + v_i] where m_i, v_i are the mean and
    variance of the reference quantile function on [(i-1)/N, i/N]. This
    makes repeated distances to one reference cost O(N log N).
    """

    def __init__(self, ref: ParticleCloud, N: int, presorted: bool = False):
        if ref.dim != 1:
            raise ValueError("quantile blocks need d=1")
        y = ref.points[:, 0]
        M = y.size
        if ref.uniform and M % N == 0:
            ys = (y if presorted else np.sort(y)).reshape(N, M // N)
            self.N = N
            self.mean = ys.mean(axis=1)
            self.var = ((ys - self.mean[:, None]) ** 2).mean(axis=1)
            return
        order = np.argsort(y, kind="stable")
        ys, wy = y[order], ref.w()[order]
        cy = np.cumsum(wy)
        cy[-1] = 1.0
        edges = np.arange(1, N + 1) / N
        edges[-1] = 1.0
        brk = np.union1d(cy, edges)
        lo = np.concatenate(([0.0], brk[:-1]))
        length = brk - lo
        keep = length > 0
        brk, lo, length = brk[keep], lo[keep], length[keep]
        mid = 0.5 * (lo + brk)
        qy = ys[np.minimum(np.searchsorted(cy, mid), ys.size - 1)]
        blk = np.minimum(np.searchsorted(edges, mid), N - 1)
        self.N = N
        self.mean = np.bincount(blk, length * qy, minlength=N) * N
        self.var = np.bincount(blk, length * (qy - self.mean[blk]) ** 2, minlength=N) * N

    def w2sq(self, x: np.ndarray) -> np.ndarray:
        """Squared W2 for a batch of uniform clouds, x of shape (..., N)."""
        xs = np.sort(x, axis=-1)
        return np.mean((xs - self.mean) ** 2 + self.var, axis=-1)
