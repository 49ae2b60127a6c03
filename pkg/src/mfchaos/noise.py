"""Counter-addressed Gaussian streams.

Every draw is addressed by (seed, role, block, step), so the numbers a
replication sees do not depend on how work is scheduled across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROLE_PARTICLES = 1
ROLE_REFERENCE = 2
ROLE_INIT = 3
ROLE_INIT_REFERENCE = 4

# target number of particles drawn per block; replications per block is
# derived from N alone, never from the thread count
BLOCK_PARTICLES = 1 << 16


def replications_per_block(N: int, antithetic: bool = False) -> int:
    b = max(1, BLOCK_PARTICLES // N)
    if antithetic:
        b = max(2, b - b % 2)
    return b


def block_layout(R: int, N: int, antithetic: bool = False):
    """List of (block index, first replication, count)."""
    B = replications_per_block(N, antithetic)
    out = []
    start = 0
    blk = 0
    while start < R:
        cnt = min(B, R - start)
        out.append((blk, start, cnt))
        start += cnt
        blk += 1
    return out


@dataclass(frozen=True)
class Stream:
    seed: int
    role: int

    def key(self) -> np.ndarray:
        return np.random.SeedSequence([int(self.seed) & (2**64 - 1), self.role]).generate_state(2, np.uint64)

    def generator(self, block: int, step: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(), counter=[0, block, step, 0]))

    def normals(self, block: int, step: int, shape) -> np.ndarray:
        return self.generator(block, step).standard_normal(shape)


class BlockNoise:
    """Brownian increments (standard normals) for one block of replications.

    ``antithetic`` is one of None, "replications" (pairs j, j+n/2 across
    replications) or "particles" (pairs within each replication).
    """

    def __init__(self, seed, role, block, shape, antithetic=None):
        self.stream = Stream(seed, role)
        self.key = self.stream.key()
        self.block = block
        self.shape = tuple(shape)
        self.antithetic = antithetic

    def __call__(self, step: int) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=self.key, counter=[0, self.block, step, 0]))
        return antithetic_draw(gen.standard_normal, self.shape, self.antithetic)


def antithetic_draw(draw, shape, mode):
    if mode is None:
        return draw(shape)
    ax = {"replications": 0, "particles": 1}[mode]
    n = shape[ax]
    if n % 2:
        raise ValueError(f"antithetic pairing needs an even count along axis {ax}")
    half = list(shape)
    half[ax] = n // 2
    z = draw(tuple(half))
    return np.concatenate([z, -z], axis=ax)
