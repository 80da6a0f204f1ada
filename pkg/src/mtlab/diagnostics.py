"""Gradient-conflict diagnostics over the encoder gradients.

Cosine similarity is the base quantity; cosine distance is reported as
1 - similarity, and both are emitted so either plotting convention works.
Gradients are captured pre-update (raw backward output for the encoder
group), flattened in sorted parameter-id order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConsecutivePair:
    t: int          # the later iteration of the pair
    task_prev: int
    task_curr: int
    similarity: float
    distance: float


@dataclass
class PairwiseCosMatrix:
    """Rolling-mean cosine distance for consecutive task pairs (i then j).

    Cells with no samples hold NaN and a zero count: absent, not zero.
    """

    values: np.ndarray
    counts: np.ndarray
    window: float


@dataclass
class GradTrace:
    """Per-iteration encoder gradient vectors (or their sketches).

    In sketch mode vectors longer than `sketch_dim` pass through a seeded
    count-sketch (each coordinate hashed to one bucket with a random sign):
    inner products are preserved unbiasedly, so cosine similarities on
    sketches deviate from the exact ones by O(1/sqrt(sketch_dim)), about
    0.016 for the default 4096. Exact mode keeps the full vectors and is
    the reference for tests.
    """

    num_tasks: int
    dim: int
    mode: str = "exact"
    sketch_dim: int = 4096
    sketch_seed: int = 0
    entries: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    _hash: np.ndarray | None = field(default=None, repr=False)
    _sign: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("exact", "sketch"):
            raise ValueError(f"trace mode must be exact or sketch, got {self.mode!r}")

    @property
    def stored_dim(self) -> int:
        if self.mode == "sketch" and self.dim > self.sketch_dim:
            return self.sketch_dim
        return self.dim

    def _project(self, vec: np.ndarray) -> np.ndarray:
        if self.mode != "sketch" or self.dim <= self.sketch_dim:
            return vec
        if self._hash is None:
            rng = np.random.Generator(np.random.SFC64(self.sketch_seed))
            self._hash = rng.integers(0, self.sketch_dim, size=self.dim)
            self._sign = rng.integers(0, 2, size=self.dim) * 2.0 - 1.0
        return np.bincount(self._hash, weights=self._sign * vec,
                           minlength=self.sketch_dim)

    def append(self, t: int, task: int, vec: np.ndarray) -> None:
        if self.entries and t <= self.entries[-1][0]:
            raise ValueError(f"iterations must be strictly increasing, got {t} "
                             f"after {self.entries[-1][0]}")
        if vec.shape != (self.dim,):
            raise ValueError(f"gradient vector has dim {vec.shape}, expected ({self.dim},)")
        if not 0 <= task < self.num_tasks:
            raise ValueError(f"task index {task} out of range for {self.num_tasks} tasks")
        self.entries.append((int(t), int(task), self._project(vec)))


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """<u,v> / (|u| |v|); rejects zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"vectors have different shapes: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    return 1.0 - cosine_similarity(u, v)


def consecutive_trace(trace: GradTrace):
    """Cosine series between each iteration's gradient and its predecessor.

    Pairs touching a zero gradient are skipped; returns (pairs, skipped
    iteration indices). Each pair is aligned to the later iteration.
    """
    if len(trace.entries) < 2:
        raise ValueError("trace must contain at least two entries")
    pairs: list[ConsecutivePair] = []
    skipped: list[int] = []
    for (t0, task0, v0), (t1, task1, v1) in zip(trace.entries, trace.entries[1:]):
        if not v0.any() or not v1.any():
            skipped.append(t1)
            continue
        sim = cosine_similarity(v0, v1)
        pairs.append(ConsecutivePair(t1, task0, task1, sim, 1.0 - sim))
    return pairs, skipped


def pairwise_matrix(trace: GradTrace, window: float = 10) -> PairwiseCosMatrix:
    """Final rolling-mean cosine distance per (previous task, current task) cell.

    Cell (i, j) aggregates consecutive pairs where task i was sampled right
    before task j; the reported value is the rolling mean (over `window`
    samples, math.inf for a plain mean) evaluated at the last sample.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    k = trace.num_tasks
    cells: dict[tuple[int, int], list[float]] = {}
    pairs, _ = consecutive_trace(trace) if len(trace.entries) >= 2 else ([], [])
    for p in pairs:
        cells.setdefault((p.task_prev, p.task_curr), []).append(p.distance)
    values = np.full((k, k), np.nan)
    counts = np.zeros((k, k), dtype=np.int64)
    for (i, j), dists in cells.items():
        w = len(dists) if math.isinf(window) else min(int(window), len(dists))
        values[i, j] = float(np.mean(dists[-w:]))
        counts[i, j] = len(dists)
    return PairwiseCosMatrix(values, counts, window)


@dataclass(frozen=True)
class ConcentrationStat:
    dim: int
    mean: float
    std: float
    p05: float
    p95: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def concentration_experiment(dims, n_pairs: int, rng,
                             bins: int = 51) -> list[ConcentrationStat]:
    """Cosine similarity of independent standard-normal vector pairs per dim.

    The similarity concentrates around 0 with std roughly 1/sqrt(d), so the
    distribution narrows as dimensionality grows. Pairs are generated in
    blocks to bound memory.
    """
    dims = [int(d) for d in dims]
    if any(d < 2 for d in dims):
        raise ValueError("dimensions must be >= 2")
    if n_pairs < 1000:
        raise ValueError("need at least 1000 pairs per dimension")
    out = []
    for d in dims:
        sims = np.empty(n_pairs)
        block = max(1, int(4_000_000 // d))
        for start in range(0, n_pairs, block):
            b = min(block, n_pairs - start)
            u = rng.standard_normal((b, d))
            v = rng.standard_normal((b, d))
            num = np.einsum("ij,ij->i", u, v)
            den = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
            sims[start:start + b] = num / den
        counts, edges = np.histogram(sims, bins=bins)
        out.append(ConcentrationStat(
            dim=d, mean=float(sims.mean()), std=float(sims.std()),
            p05=float(np.percentile(sims, 5)), p95=float(np.percentile(sims, 95)),
            hist_counts=counts, hist_edges=edges))
    return out
