"""Running cosine statistics per sub-center and the derived ignore thresholds."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class StatEntry:
    n: int
    mu: float
    sigma: float
    threshold: float  # mu + lambda1 * sigma; +inf when n == 0


class CosineStatsAccumulator:
    """Streaming per-sub-center sums; mergeable across workers."""

    def __init__(self):
        self._n: dict[int, int] = {}
        self._sum: dict[int, float] = {}
        self._sumsq: dict[int, float] = {}

    def accumulate(self, assignments) -> None:
        """assignments: iterable of (uid, cos) pairs."""
        for uid, c in assignments:
            if not -1.0 <= c <= 1.0:
                raise ValueError(f"cosine {c} outside [-1, 1]")
            self._n[uid] = self._n.get(uid, 0) + 1
            self._sum[uid] = self._sum.get(uid, 0.0) + c
            self._sumsq[uid] = self._sumsq.get(uid, 0.0) + c * c

    def merge(self, other: "CosineStatsAccumulator") -> None:
        for uid in other._n:
            self._n[uid] = self._n.get(uid, 0) + other._n[uid]
            self._sum[uid] = self._sum.get(uid, 0.0) + other._sum[uid]
            self._sumsq[uid] = self._sumsq.get(uid, 0.0) + other._sumsq[uid]

    def count(self, uid: int) -> int:
        return self._n.get(uid, 0)


def finalize(acc: CosineStatsAccumulator, lambda1: float, uids=None) -> dict:
    """Epoch statistics: uid -> StatEntry.

    Population standard deviation (divide by n); sub-centers with no
    assigned samples get a +inf threshold so they never mask anything.
    """
    out = {}
    if uids is None:
        uids = acc._n.keys()
    for uid in uids:
        n = acc._n.get(uid, 0)
        if n == 0:
            out[uid] = StatEntry(0, math.nan, math.nan, math.inf)
            continue
        mu = acc._sum[uid] / n
        var = max(0.0, acc._sumsq[uid] / n - mu * mu)
        sigma = math.sqrt(var)
        out[uid] = StatEntry(n, mu, sigma, mu + lambda1 * sigma)
    return out


def thresholds_from(stats: dict) -> dict:
    return {uid: e.threshold for uid, e in stats.items()}


def dump_stats(stats: dict, bank, path: str) -> None:
    """Debug snapshot: one JSON object per active sub-center."""
    rows = []
    for label, c in bank.all_active():
        e = stats.get(c.uid)
        if e is None:
            continue
        rows.append({"j": label, "m": c.uid, "n": e.n, "mu": e.mu,
                     "sigma": e.sigma, "D": e.threshold})
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)
