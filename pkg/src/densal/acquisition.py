"""Shard-parallel acquisition scoring from per-region sufficient statistics.

Pass 1 runs per shard and reduces every region to (n, v, w, s): pixel count,
embedding sum, sum of squared embedding norms and summed uncertainty. A single
reduction then yields the pixel count N and mean mu, from which each region's
total squared distance to the mean is

    D_q = w_q - 2 <v_q, mu> + n_q |mu|^2

and the score g(q) = s_q / sum(s) + D_q / sum(D). All global sums use
``math.fsum`` (exactly rounded), so results do not depend on how regions are
split into shards or in which order shards arrive.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_REGION_SIDE = 120


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    region_id: int
    row: int
    col: int
    side: int = DEFAULT_REGION_SIDE
    shard_id: int = 0
    tile: str = ""


@dataclass
class RegionStats:
    region_id: int
    n: int
    v: np.ndarray
    w: float
    s: float
    shard_id: int = 0

    def to_record(self) -> dict:
        return {
            "region_id": int(self.region_id),
            "shard_id": int(self.shard_id),
            "n": int(self.n),
            "v": [float(x) for x in self.v],
            "w": float(self.w),
            "s": float(self.s),
        }

    @classmethod
    def from_record(cls, rec) -> "RegionStats":
        return cls(int(rec["region_id"]), int(rec["n"]), np.asarray(rec["v"], dtype=np.float64),
                   float(rec["w"]), float(rec["s"]), int(rec.get("shard_id", 0)))


@dataclass
class GlobalStats:
    N: int
    mu: np.ndarray
    sum_s: float
    sum_d: float
    D: dict[int, float]

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "mu": [float(x) for x in self.mu],
            "sum_s": self.sum_s,
            "sum_d": self.sum_d,
            "D": {str(k): v for k, v in sorted(self.D.items())},
        }

    @classmethod
    def from_json(cls, d) -> "GlobalStats":
        return cls(int(d["N"]), np.asarray(d["mu"], dtype=np.float64), float(d["sum_s"]),
                   float(d["sum_d"]), {int(k): float(v) for k, v in d["D"].items()})


@dataclass
class AcquisitionScore:
    region_id: int
    uncertainty_term: float
    diversity_term: float

    @property
    def g(self) -> float:
        return self.uncertainty_term + self.diversity_term


def region_stats(region_id: int, embeddings, uncertainties, valid=None, shard_id: int = 0):
    """Sufficient statistics of one region, or None if it has no valid pixel.

    ``embeddings`` is (..., d) per pixel and ``uncertainties`` the matching
    per-pixel ensemble variance.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    z = z.reshape(-1, z.shape[-1])
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    if len(u) != len(z):
        raise AcquisitionError("embeddings and uncertainties cover different pixels")
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        z, u = z[keep], u[keep]
    if len(u) == 0:
        log.info("region %s has no valid pixels, dropped", region_id)
        return None
    v = np.array([math.fsum(col) for col in z.T])
    w = math.fsum(np.einsum("ij,ij->i", z, z))
    s = math.fsum(u)
    return RegionStats(region_id, len(u), v, w, s, shard_id)


def global_reduce(stats) -> GlobalStats:
    """Reduce all region statistics to N, mu, per-region D_q, sum(s), sum(D)."""
    stats = sorted(stats, key=lambda st: st.region_id)
    if not stats:
        raise AcquisitionError("global_reduce needs at least one region")
    ids = [st.region_id for st in stats]
    if len(set(ids)) != len(ids):
        raise AcquisitionError("duplicate region ids across shards")
    N = sum(st.n for st in stats)
    if N == 0:
        raise AcquisitionError("total pixel count N is zero")
    V = np.stack([st.v for st in stats])
    mu = np.array([math.fsum(col) for col in V.T]) / N
    mu2 = math.fsum(mu * mu)
    D = {}
    for st in stats:
        d = math.fsum([st.w, -2.0 * math.fsum(st.v * mu), st.n * mu2])
        D[st.region_id] = max(d, 0.0)
    return GlobalStats(
        N,
        mu,
        math.fsum(st.s for st in stats),
        math.fsum(D.values()),
        D,
    )


def score(stats, globals_: GlobalStats) -> list[AcquisitionScore]:
    """g(q) = s_q / sum(s) + D_q / sum(D) for each region in ``stats``.

    A zero denominator (degenerate ensemble or identical embeddings) makes
    that term uniform over all regions seen by the reduction.
    """
    n_regions = len(globals_.D)
    out = []
    if globals_.sum_s <= 0:
        log.warning("sum of uncertainties is zero; uncertainty term set uniform")
    if globals_.sum_d <= 0:
        log.warning("sum of distances is zero; diversity term set uniform")
    for st in stats:
        if st.region_id not in globals_.D:
            raise AcquisitionError(f"region {st.region_id} missing from global reduction")
        unc = st.s / globals_.sum_s if globals_.sum_s > 0 else 1.0 / n_regions
        div = globals_.D[st.region_id] / globals_.sum_d if globals_.sum_d > 0 else 1.0 / n_regions
        out.append(AcquisitionScore(st.region_id, unc, div))
    return out


def naive_total_distance(z, mu) -> float:
    """Direct sum of |z - mu|^2 over pixels, for checking D_q."""
    d = np.asarray(z, dtype=np.float64).reshape(-1, len(mu)) - mu
    return math.fsum(np.einsum("ij,ij->i", d, d))


# ---------------------------------------------------------------------------
# interchange files


def write_stats_jsonl(path, stats) -> None:
    with open(path, "w") as fh:
        for st in sorted(stats, key=lambda s: s.region_id):
            fh.write(json.dumps(st.to_record()) + "\n")


def read_stats_jsonl(path) -> list[RegionStats]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(RegionStats.from_record(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise AcquisitionError(f"{path}:{i + 1}: bad stats record ({exc})") from exc
    return out


def write_globals(path, g: GlobalStats) -> None:
    Path(path).write_text(json.dumps(g.to_json(), indent=1))


def read_globals(path) -> GlobalStats:
    return GlobalStats.from_json(json.loads(Path(path).read_text()))


def write_scores_csv(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["region_id", "uncertainty_term", "diversity_term", "g"])
        for sc in sorted(scores, key=lambda s: s.region_id):
            wr.writerow([sc.region_id, repr(sc.uncertainty_term), repr(sc.diversity_term), repr(sc.g)])


def read_scores_csv(path) -> list[AcquisitionScore]:
    with open(path, newline="") as fh:
        return [
            AcquisitionScore(int(r["region_id"]), float(r["uncertainty_term"]), float(r["diversity_term"]))
            for r in csv.DictReader(fh)
        ]
