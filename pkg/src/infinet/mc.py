"""Sharded Monte-Carlo accumulation.

Samples are split into a fixed number of shards, each with a seed derived from
the master seed through :class:`numpy.random.SeedSequence`. Shard statistics
are merged in shard order, so the result depends on ``(seed, n_samples,
n_shards)`` only and never on how many worker threads ran the shards.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_SHARDS = 8
DEFAULT_BATCHES = 256
CHUNK = 1 << 16


def max_workers() -> int:
    """Worker cap from ``INFINET_THREADS`` (defaults to the CPU count)."""
    env = os.environ.get("INFINET_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            pass
    return n


@dataclass
class Moments:
    """Running mean and scatter matrix of a vector-valued sample."""

    n: int
    mean: np.ndarray
    m2: np.ndarray
    batches: list = field(default_factory=list, repr=False)

    @classmethod
    def of(cls, values: np.ndarray) -> "Moments":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        mean = values.mean(axis=0)
        centered = values - mean
        return cls(len(values), mean, centered.T @ centered)

    def merge(self, other: "Moments") -> "Moments":
        # Chan et al. pairwise update
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @property
    def cov(self) -> np.ndarray:
        """Sample covariance of one draw (ddof=1)."""
        return self.m2 / max(self.n - 1, 1)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov) / self.n)

    def jackknife_stderr(self, fn: Callable[[np.ndarray], float]) -> float:
        """Leave-one-batch-out jackknife standard error of ``fn(mean)``.

        Works for non-smooth ``fn`` (e.g. correlation clamping) where the delta
        method breaks down. Needs the batch moments recorded by
        :func:`sharded_moments`.
        """
        b = len(self.batches)
        if b < 2:
            raise ValueError("jackknife needs at least two batches")
        total = self.mean * self.n
        vals = np.array([fn((total - p.mean * p.n) / (self.n - p.n)) for p in self.batches])
        return float(np.sqrt((b - 1) / b * np.sum((vals - vals.mean()) ** 2)))


def shard_sizes(n_samples: int, n_shards: int) -> list[int]:
    n_shards = max(1, min(n_shards, n_samples))
    base, extra = divmod(n_samples, n_shards)
    return [base + (1 if s < extra else 0) for s in range(n_shards)]


def sharded_moments(
    draw: Callable[[np.random.Generator, int], np.ndarray],
    n_samples: int,
    seed,
    n_shards: int = DEFAULT_SHARDS,
    workers: int | None = None,
    n_batches: int = DEFAULT_BATCHES,
) -> Moments:
    """Accumulate the moments of ``draw(rng, k)`` over ``n_samples`` draws.

    ``draw`` returns a ``(k,)`` or ``(k, p)`` array of per-sample values. Each
    shard is further cut into fixed batches whose moments are kept on the
    result for jackknife error estimates.
    ``seed`` may be an int, a sequence of ints, or a SeedSequence.
    """
    if n_samples < 2:
        raise ValueError("need at least two Monte-Carlo samples")
    sizes = shard_sizes(n_samples, n_shards)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(len(sizes))

    per_shard = max(1, -(-n_batches // len(sizes)))

    def run(shard: int) -> list[Moments]:
        rng = np.random.Generator(np.random.PCG64(children[shard]))
        out = []
        for size in shard_sizes(sizes[shard], per_shard):
            acc = None
            left = size
            while left > 0:
                k = min(CHUNK, left)
                part = Moments.of(draw(rng, k))
                acc = part if acc is None else acc.merge(part)
                left -= k
            out.append(acc)
        return out

    workers = workers or max_workers()
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(sizes))) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(s) for s in range(len(sizes))]
    batches = [b for part in parts for b in part]
    total = batches[0]
    for part in batches[1:]:
        total = total.merge(part)
    total.batches = batches
    return total
