"""Batch construction from acquisition scores, plus baseline strategies.

``select_active`` keeps the q highest-scoring regions, clusters their
embeddings into B groups with weighted k-means (weight 1/(q * g)) and keeps
the member nearest each centroid. Multiplying every weight by the same
constant changes neither the k-means++ draws nor the centroids, so the
1/(q * B * g) variant selects the same batch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 100_000
DEFAULT_BUDGET = 50


class SelectionError(ValueError):
    pass


@dataclass
class CandidatePool:
    """Top-q regions, sorted by descending g (ties by region id)."""

    region_ids: np.ndarray
    embeddings: np.ndarray
    g: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.region_ids)

    @classmethod
    def top_q(cls, region_ids, embeddings, g, coords, q: int = DEFAULT_POOL_SIZE) -> "CandidatePool":
        region_ids = np.asarray(region_ids, dtype=np.int64)
        g = np.asarray(g, dtype=np.float64)
        order = np.lexsort((region_ids, -g))[:min(q, len(g))]
        return cls(
            region_ids[order],
            np.asarray(embeddings, dtype=np.float64)[order],
            g[order],
            np.asarray(coords, dtype=np.float64)[order],
        )


@dataclass
class Selection:
    region_id: int
    cluster_id: int
    distance: float
    g: float
    x: float
    y: float
    rank: int = 0


@dataclass
class SelectionBatch:
    entries: list[Selection]
    alternates: list[Selection] = field(default_factory=list)
    strategy: str = "active"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def region_ids(self) -> list[int]:
        return [e.region_id for e in self.entries]

    def to_jsonl(self) -> str:
        lines = []
        for e in sorted(self.entries + self.alternates, key=lambda e: (e.cluster_id, e.rank)):
            lines.append(json.dumps({
                "region_id": e.region_id, "cluster_id": e.cluster_id,
                "x_m": e.x, "y_m": e.y, "g": e.g, "rank": e.rank,
            }))
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self) -> str:
        rows = [f"{'cluster':>7} {'region':>8} {'x_m':>12} {'y_m':>12} {'g':>10} {'dist':>10}"]
        for e in sorted(self.entries, key=lambda e: e.cluster_id):
            rows.append(f"{e.cluster_id:>7} {e.region_id:>8} {e.x:>12.1f} {e.y:>12.1f} {e.g:>10.5f} {e.distance:>10.4f}")
        rows.append(f"{len(self.entries)} regions selected ({self.strategy})")
        return "\n".join(rows)


# ---------------------------------------------------------------------------
# weighted k-means


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: float
    n_iter: int
    reseeded: int


def _sqdist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeanspp_init(X, weights, k, rng):
    """Weighted k-means++ seeding: draw prob proportional to w * D^2."""
    n = len(X)
    p = weights / weights.sum()
    first = rng.choice(n, p=p)
    idx = [first]
    d2 = _sqdist(X, X[[first]])[:, 0]
    for _ in range(1, k):
        mass = weights * d2
        total = mass.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), idx)
            nxt = int(remaining[0])
        else:
            nxt = int(rng.choice(n, p=mass / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sqdist(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def weighted_kmeans(X, weights, k, seed=0, max_iter=100, tol=1e-6) -> KMeansResult:
    """Minimize sum_i w_i |x_i - c_a(i)|^2 with Lloyd iterations."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(X) < k:
        raise SelectionError(f"cannot form {k} clusters from {len(X)} points")
    if (w <= 0).any() or not np.all(np.isfinite(w)):
        raise SelectionError("weights must be positive and finite")
    # weights enter only through ratios; normalizing keeps the scale-invariance exact
    w = w / w.max()
    rng = np.random.default_rng(seed)
    C = kmeanspp_init(X, w, k, rng)
    prev = math.inf
    reseeded = 0
    labels = np.zeros(len(X), dtype=np.int64)
    obj = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        d = _sqdist(X, C)
        labels = d.argmin(axis=1)
        mind = d[np.arange(len(X)), labels]
        obj = float(np.sum(w * mind))
        for j in range(k):
            members = labels == j
            if not members.any():
                far = int(np.argmax(w * mind))
                log.info("k-means: cluster %d empty, reseeded from point %d", j, far)
                C[j] = X[far]
                labels[far] = j
                mind[far] = 0.0
                reseeded += 1
                continue
            wm = w[members]
            C[j] = wm @ X[members] / wm.sum()
        if prev - obj <= tol * max(prev, 1e-300) and it > 1:
            break
        prev = obj
    d = _sqdist(X, C)
    labels = d.argmin(axis=1)
    return KMeansResult(C, labels, float(np.sum(w * d[np.arange(len(X)), labels])), it, reseeded)


def select_active(pool: CandidatePool, B: int = DEFAULT_BUDGET, seed: int = 0,
                  weight_scale: float = 1.0) -> SelectionBatch:
    """One representative per weighted k-means cluster of the pool.

    The representative is the cluster member nearest its centroid; the
    second-nearest member is emitted as a rank-1 alternate for annotators.
    ``weight_scale`` multiplies every weight (1/(q*g)) and exists to check
    that the batch does not depend on it.
    """
    if B < 1:
        raise SelectionError("budget B must be >= 1")
    if B > len(pool):
        raise SelectionError(f"budget B={B} exceeds pool of {len(pool)}")
    if (pool.g <= 0).any():
        raise SelectionError("acquisition scores must be positive")
    q = len(pool)
    weights = weight_scale / (q * pool.g)
    km = weighted_kmeans(pool.embeddings, weights, B, seed=seed)
    d = _sqdist(pool.embeddings, km.centers)

    entries, alternates = [], []
    for j in range(B):
        members = np.flatnonzero(km.labels == j)
        if len(members) == 0:
            log.info("cluster %d ended empty; no representative", j)
            continue
        dj = d[members, j]
        order = members[np.lexsort((pool.region_ids[members], dj))]
        for rank, i in enumerate(order[:2]):
            sel = Selection(int(pool.region_ids[i]), j, float(d[i, j]), float(pool.g[i]),
                            float(pool.coords[i, 0]), float(pool.coords[i, 1]), rank)
            (entries if rank == 0 else alternates).append(sel)
    return SelectionBatch(entries, alternates, "active")


def select_top(pool: CandidatePool, B: int) -> SelectionBatch:
    """Top-B by g without clustering (used when the unlabelled pool is small)."""
    if B > len(pool):
        raise SelectionError(f"budget B={B} exceeds pool of {len(pool)}")
    entries = [
        Selection(int(pool.region_ids[i]), i, 0.0, float(pool.g[i]),
                  float(pool.coords[i, 0]), float(pool.coords[i, 1]))
        for i in range(B)
    ]
    return SelectionBatch(entries, [], "active_top")


# ---------------------------------------------------------------------------
# baselines


def _batch_from(region_ids, coords, picks, strategy):
    entries = [
        Selection(int(region_ids[i]), c, 0.0, float("nan"), float(coords[i, 0]), float(coords[i, 1]))
        for c, i in enumerate(picks)
    ]
    return SelectionBatch(entries, [], strategy)


def select_naive(region_ids, coords, B: int, seed: int = 0) -> SelectionBatch:
    """A random anchor region and its B-1 nearest neighbours in the plane."""
    region_ids = np.asarray(region_ids)
    coords = np.asarray(coords, dtype=np.float64)
    if B < 1:
        raise SelectionError("budget B must be >= 1")
    if B > len(region_ids):
        raise SelectionError(f"budget B={B} exceeds {len(region_ids)} regions")
    rng = np.random.default_rng(seed)
    anchor = int(rng.integers(len(region_ids)))
    d = np.sum((coords - coords[anchor]) ** 2, axis=1)
    order = np.lexsort((region_ids, d))
    picks = [anchor] + [int(i) for i in order if i != anchor][:B - 1]
    return _batch_from(region_ids, coords, picks, "naive")


def select_manual(region_ids, coords, B: int, seed: int = 0) -> SelectionBatch:
    """Uniform sample without replacement from a curated region list."""
    region_ids = np.asarray(region_ids)
    if B < 1:
        raise SelectionError("budget B must be >= 1")
    if B > len(region_ids):
        raise SelectionError(f"budget B={B} exceeds curated list of {len(region_ids)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(region_ids), size=B, replace=False)
    return _batch_from(region_ids, np.asarray(coords, dtype=np.float64), picks, "manual")


def allocate_by_strip(B: int, areas) -> list[int]:
    """Largest-remainder apportionment of B across strips by land area."""
    areas = np.asarray(areas, dtype=np.float64)
    if len(areas) == 0 or (areas < 0).any() or areas.sum() <= 0:
        raise SelectionError("strip areas must be non-negative with a positive total")
    if B < 0:
        raise SelectionError("budget must be >= 0")
    quota = B * areas / areas.sum()
    base = np.floor(quota).astype(int)
    left = B - base.sum()
    # ties broken towards the earlier strip
    order = np.lexsort((np.arange(len(areas)), -(quota - base)))
    base[order[:left]] += 1
    return base.tolist()
