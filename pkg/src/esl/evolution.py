"""Sub-center evolution: producing, dropping and merging between epochs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .margin_loss import SubCenterBank
from .stats import StatEntry


@dataclass(frozen=True)
class EvolutionConfig:
    lambda1: float = 2.0    # ignore-threshold width
    lambda2: float = 2.0    # producing split width
    lambda3: float = 0.25   # dropping mean-cosine floor
    lambda4: float = 3.0    # merging similarity width
    m_init: int = 3
    epsilon_start: int = 1  # first epoch at which evolution runs
    total_epochs: int = 40
    # support floor: sub-centers claiming <= this many samples for a full
    # epoch are dropped along with those samples (0 keeps only the vacant
    # n=0 rule); few-shot centers are never dominated by a real mode
    min_support: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon_start < self.total_epochs:
            raise ValueError("need 0 <= epsilon_start < total_epochs")
        if self.m_init < 1:
            raise ValueError("m_init must be >= 1")
        if self.min_support < 0:
            raise ValueError("min_support must be >= 0")

    @classmethod
    def calibrated(cls, **overrides) -> "EvolutionConfig":
        """Settings tuned for the low-dimensional synthetic regime.

        The class defaults are calibrated for high-dimensional embeddings
        (hundreds of dimensions), where cosine noise between unrelated unit
        vectors is tiny. At d ~ 16 the noise floor scales like 1/sqrt(d), so
        the same widths mis-fire: with tangent-noise variance tau^2 the
        assigned cosine behaves like 1 - tau^2 * chi2_{d-1} / 2, whose
        mean-plus-lambda4-sigma bound exceeds 1 (unreachable by any cosine)
        whenever lambda4 > sqrt((d-1)/2) ~ 2.7 at d=16 — so the default
        merge width can never fire there. This preset re-centers every
        width for that regime:

        - lambda1 = -1: mask only negatives above mu - sigma, i.e. genuine
          look-alikes; at small d the mu + 2*sigma form never engages.
        - lambda2 = 2.3: splits minority modes without firing on clean tails.
        - lambda3 = 0.45: sits between the mean cosine of scattered
          singleton-fed centers (~0.45 via argmax self-selection) and of
          coherent clusters (~0.93).
        - lambda4 = 0: merge when the centers are at least as close as each
          one's own samples are on average; sigma-widened bounds are
          unreachable here (see above).
        - min_support = 2: kills 1-2-sample parasite centers whose clamped
          cosine (~1) blocks both the mean floor and merging.
        """
        base = dict(lambda1=-1.0, lambda2=2.3, lambda3=0.45, lambda4=0.0,
                    min_support=2, epsilon_start=2)
        base.update(overrides)
        return cls(**base)


class LabelMap:
    """Original class labels -> current labels, plus the dropped-sample set."""

    def __init__(self, n_classes: int, n_samples: int):
        self.mapping = {j: j for j in range(n_classes)}
        self.dropped = np.zeros(n_samples, dtype=bool)

    def current(self, label: int) -> int:
        return self.mapping[label]

    def apply(self, labels: np.ndarray) -> np.ndarray:
        lut = np.array([self.mapping[j] for j in range(len(self.mapping))])
        return lut[labels]

    def relabel(self, group, target: int) -> None:
        """Point every original label currently mapping into `group` at target."""
        group = set(group)
        for orig, cur in self.mapping.items():
            if cur in group:
                self.mapping[orig] = target

    def mark_dropped(self, indices) -> None:
        self.dropped[np.asarray(list(indices), dtype=np.int64)] = True

    def is_identity(self) -> bool:
        return all(o == c for o, c in self.mapping.items())


class EpochCache:
    """Last-seen assignment, cosine and feature for every trained sample."""

    def __init__(self):
        self.by_uid: dict[int, dict] = {}

    def add(self, sample_indices, uids_cos, features) -> None:
        for i, (uid, c) in enumerate(uids_cos):
            slot = self.by_uid.setdefault(uid, {"idx": [], "cos": [], "feat": []})
            slot["idx"].append(int(sample_indices[i]))
            slot["cos"].append(float(c))
            slot["feat"].append(np.array(features[i], dtype=np.float64))

    def samples_of(self, uid: int):
        slot = self.by_uid.get(uid)
        if slot is None:
            return np.asarray([], dtype=np.int64), np.zeros((0,)), np.zeros((0, 0))
        return (np.asarray(slot["idx"], dtype=np.int64),
                np.asarray(slot["cos"]),
                np.stack(slot["feat"]))


class UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller id becomes the root
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def components(self):
        groups: dict[int, list] = {}
        for x in self.parent:
            groups.setdefault(self.find(x), []).append(x)
        return [sorted(g) for g in sorted(groups.values(), key=min)]


def produce(features: np.ndarray, cos_values: np.ndarray, entry: StatEntry,
            lambda2: float):
    """New sub-center from the samples falling below mu - lambda2 * sigma.

    Returns the unit-norm mean of those samples' features, or None when no
    sample falls below the threshold.
    """
    below = cos_values < entry.mu - lambda2 * entry.sigma
    t = int(np.sum(below))
    if t == 0:
        return None
    w = features[below].sum(axis=0) / t
    return w / np.linalg.norm(w)


def should_drop(entry: StatEntry, lambda3: float, min_support: int = 0) -> bool:
    """Drop when the mean assigned cosine is at most lambda3; vacant
    sub-centers (no samples all epoch) and, when min_support > 0, centers
    holding at most min_support samples are dropped too."""
    if entry.n <= max(0, min_support):
        return True
    return entry.mu <= lambda3


def merge_condition(w_a: np.ndarray, w_b: np.ndarray, stats_a: StatEntry,
                    stats_b: StatEntry, lambda4: float) -> bool:
    a = w_a / np.linalg.norm(w_a)
    b = w_b / np.linalg.norm(w_b)
    bound = max(stats_a.mu + lambda4 * stats_a.sigma,
                stats_b.mu + lambda4 * stats_b.sigma)
    return float(np.dot(a, b)) >= bound


def merge_groups(bank: SubCenterBank, stats: dict, lambda4: float,
                 label_map: LabelMap):
    """One global merge pass over all active sub-centers with statistics.

    Builds the graph of pairwise merge conditions (within-class pairs
    included), collapses each connected component of size >= 2 into a single
    unit-norm mean sub-center, and relabels every involved class to the
    minimum label in the component.
    """
    eligible = [(label, c) for label, c in bank.all_active()
                if c.uid in stats and stats[c.uid].n > 0]
    events = []
    if len(eligible) < 2:
        return events
    uids = [c.uid for _, c in eligible]
    labels = {c.uid: label for label, c in eligible}
    W = np.stack([c.weight for _, c in eligible])
    Wn = W / np.linalg.norm(W, axis=1, keepdims=True)
    cos = Wn @ Wn.T
    bound = np.array([stats[u].mu + lambda4 * stats[u].sigma for u in uids])

    uf = UnionFind(uids)
    for a in range(len(uids)):
        for b in range(a + 1, len(uids)):
            if cos[a, b] >= max(bound[a], bound[b]):
                uf.union(uids[a], uids[b])

    row = {u: t for t, u in enumerate(uids)}
    alias: dict[int, int] = {}  # relabels executed earlier in this pass

    def resolve(label: int) -> int:
        while label in alias:
            label = alias[label]
        return label

    for comp in uf.components():
        if len(comp) < 2:
            continue
        member_labels = sorted({resolve(labels[u]) for u in comp})
        target = min(member_labels)
        new_w = Wn[[row[u] for u in comp]].mean(axis=0)
        new_w /= np.linalg.norm(new_w)
        for u in comp:
            bank.deactivate(u)
        new_c = bank.add_center(target, new_w)
        if len(member_labels) > 1:
            label_map.relabel(member_labels, target)
            for src in member_labels:
                if src != target:
                    bank.move_class(src, target)
                    alias[src] = target
        events.append({"op": "merge", "class": target,
                       "detail": {"members": sorted(comp), "new_uid": new_c.uid,
                                  "classes": member_labels}})
    return events


def evolve_epoch(bank: SubCenterBank, stats: dict, cache: EpochCache,
                 cfg: EvolutionConfig, label_map: LabelMap, epoch: int):
    """Producing for every class/sub-center, then dropping, then one global
    merge pass, in exactly this order. Returns the event log."""
    events = []
    # snapshot: only sub-centers that have a full epoch of statistics evolve
    established = [(label, c) for label, c in bank.all_active() if c.uid in stats]

    for label, c in established:
        entry = stats[c.uid]
        if entry.n == 0:
            continue
        _, cos_vals, feats = cache.samples_of(c.uid)
        new_w = produce(feats, cos_vals, entry, cfg.lambda2)
        if new_w is not None:
            new_c = bank.add_center(label, new_w)
            events.append({"op": "produce", "class": label,
                           "detail": {"from_uid": c.uid, "new_uid": new_c.uid,
                                      "n_below": int(np.sum(
                                          cos_vals < entry.mu - cfg.lambda2 * entry.sigma))}})

    for label, c in established:
        if not c.active:
            continue
        entry = stats[c.uid]
        if should_drop(entry, cfg.lambda3, cfg.min_support):
            bank.deactivate(c.uid)
            idx, _, _ = cache.samples_of(c.uid)
            label_map.mark_dropped(idx)
            events.append({"op": "drop", "class": label,
                           "detail": {"uid": c.uid, "n": entry.n,
                                      "mu": None if entry.n == 0 else entry.mu,
                                      "n_samples_dropped": len(idx)}})

    events.extend(merge_groups(bank, stats, cfg.lambda4, label_map))
    for e in events:
        e["epoch"] = epoch
    return events
