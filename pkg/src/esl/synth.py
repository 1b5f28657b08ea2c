"""Synthetic noisy-cluster datasets on the unit hypersphere.

Each class is described by a triple (N, K, C): N identities total, K of them
with enough samples to form a valid cluster, and C of those clusters shared
with another class. Ground-truth identity ids are carried along for auditing
only; the training path never sees them.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-9

# noise-cell flags
TRIANGLE = "triangle"  # multiple valid clusters in one class
SQUARE = "square"      # outlier (singleton) identities present
DIAMOND = "diamond"    # a cluster identity shared with another class


class SpecError(ValueError):
    """Raised when a class spec (or a set of them) is inconsistent."""


def classify_noise_cell(n: int, k: int, c: int) -> frozenset:
    """Map a per-class (N, K, C) triple to its set of noise flags.

    The empty set is the clean cell (N = K = 1, C = 0).
    """
    if k > n:
        raise SpecError(f"k_clusters={k} exceeds n_identities={n}")
    if n < 0 or c < 0:
        raise SpecError(f"negative count in (n={n}, k={k}, c={c})")
    if c > k:
        raise SpecError(f"c_conflicts={c} exceeds k_clusters={k}")
    flags = set()
    if k > 1:
        flags.add(TRIANGLE)
    if n > k:
        flags.add(SQUARE)
    if c > 0:
        flags.add(DIAMOND)
    return frozenset(flags)


@dataclass(frozen=True)
class IdentityPrototype:
    """One latent identity: a unit direction plus an angular concentration."""

    id: int
    direction: np.ndarray
    concentration: float

    def __post_init__(self):
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"identity {self.id}: direction norm {norm} is not 1")
        if self.concentration <= 0:
            raise ValueError(f"identity {self.id}: concentration must be > 0")


@dataclass(frozen=True)
class NkcClassSpec:
    """Per-class recipe: label, (N, K, C) and the common valid-cluster size."""

    class_label: int
    n_identities: int
    k_clusters: int
    c_conflicts: int = 0
    samples_per_cluster: int = 10

    def validate(self) -> None:
        n, k, c = self.n_identities, self.k_clusters, self.c_conflicts
        if n < 0 or k < 0 or c < 0:
            raise SpecError(f"class {self.class_label}: negative count in (N={n}, K={k}, C={c})")
        if k > n:
            raise SpecError(f"class {self.class_label}: K={k} > N={n}")
        if c > k:
            raise SpecError(f"class {self.class_label}: C={c} > K={k}")
        if k >= 1 and self.samples_per_cluster < 2:
            raise SpecError(
                f"class {self.class_label}: samples_per_cluster={self.samples_per_cluster} < 2"
            )

    def noise_cell(self) -> frozenset:
        return classify_noise_cell(self.n_identities, self.k_clusters, self.c_conflicts)


@dataclass
class Dataset:
    """Generated samples with noisy labels plus hidden ground truth."""

    dim: int
    inputs: np.ndarray          # (n, dim) unit rows
    noisy_labels: np.ndarray    # (n,) int labels in [0, S)
    true_identity: np.ndarray   # (n,) int identity ids; audit only
    class_specs: list = field(default_factory=list)
    noise_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        n = len(self.inputs)
        if len(self.noisy_labels) != n or len(self.true_identity) != n:
            raise ValueError("inputs/noisy_labels/true_identity lengths differ")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def n_classes(self) -> int:
        return len(self.class_specs)

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "noise_ratio": self.noise_ratio,
            "classes": [
                {
                    "class_label": s.class_label,
                    "n_identities": s.n_identities,
                    "k_clusters": s.k_clusters,
                    "c_conflicts": s.c_conflicts,
                    "samples_per_cluster": s.samples_per_cluster,
                }
                for s in self.class_specs
            ],
            "samples": [
                {
                    "x": [float(v) for v in self.inputs[i]],
                    "label": int(self.noisy_labels[i]),
                    "identity": int(self.true_identity[i]),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Dataset":
        specs = [
            NkcClassSpec(
                class_label=c["class_label"],
                n_identities=c["n_identities"],
                k_clusters=c["k_clusters"],
                c_conflicts=c["c_conflicts"],
                samples_per_cluster=c["samples_per_cluster"],
            )
            for c in d["classes"]
        ]
        samples = d["samples"]
        n = len(samples)
        inputs = np.empty((n, d["dim"]), dtype=np.float64)
        labels = np.empty(n, dtype=np.int64)
        idents = np.empty(n, dtype=np.int64)
        for i, s in enumerate(samples):
            inputs[i] = s["x"]
            labels[i] = s["label"]
            idents[i] = s["identity"]
        return cls(
            dim=d["dim"],
            inputs=inputs,
            noisy_labels=labels,
            true_identity=idents,
            class_specs=specs,
            noise_ratio=d["noise_ratio"],
            seed=d["seed"],
        )

    def save(self, path: str) -> None:
        # floats serialized with repr (shortest round-trip exact form)
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_json_dict(), f)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Dataset":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_identity_prototypes(count: int, dim: int, concentration: float, seed: int):
    """Draw `count` identity directions uniformly on the (dim-1)-sphere."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if dim < 2:
        raise ValueError("dim must be >= 2 (cosine geometry degenerates below)")
    rng = np.random.default_rng(seed)
    protos = []
    for i in range(count):
        d = _unit(rng.standard_normal(dim))
        protos.append(IdentityPrototype(id=i, direction=d, concentration=concentration))
    return protos


def _draw_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    return _unit(rng.standard_normal(dim))


def _draw_sample(rng: np.random.Generator, direction: np.ndarray, concentration: float) -> np.ndarray:
    # tangent-space Gaussian with std 1/sqrt(concentration), then renormalize
    sigma = 1.0 / math.sqrt(concentration)
    t = rng.standard_normal(direction.shape[0]) * sigma
    t -= np.dot(t, direction) * direction
    return _unit(direction + t)


def _pair_conflict_slots(specs) -> list:
    """Match per-class conflict slots into cross-class pairs.

    Every class with C > 0 contributes C slots; each pair of slots from two
    distinct classes becomes one shared identity. Greedy largest-first
    matching; fails exactly when the multiset is unpairable.
    """
    remaining = {s.class_label: s.c_conflicts for s in specs if s.c_conflicts > 0}
    total = sum(remaining.values())
    if total == 0:
        return []
    if len(remaining) < 2:
        offender = next(iter(remaining))
        raise SpecError(
            f"class {offender}: c_conflicts > 0 needs at least one other class with a conflict slot"
        )
    if total % 2 != 0 or max(remaining.values()) > total // 2:
        raise SpecError(f"conflict slots {dict(remaining)} cannot be paired across classes")
    pairs = []
    while sum(remaining.values()) > 0:
        order = sorted(remaining, key=lambda c: (-remaining[c], c))
        a, b = order[0], order[1]
        if remaining[b] == 0:
            raise SpecError(f"conflict slots {dict(remaining)} cannot be paired across classes")
        pairs.append((min(a, b), max(a, b)))
        remaining[a] -= 1
        remaining[b] -= 1
    return pairs


def generate_dataset(specs, dim: int, concentration: float, seed: int) -> Dataset:
    """Realize a list of class specs as unit-norm samples with ground truth.

    Per class: K cluster identities get samples_per_cluster samples each,
    N - K outlier identities get 1 sample each, and C of the K clusters are
    shared identities paired with other classes.
    """
    if dim < 2:
        raise SpecError("dim must be >= 2")
    specs = sorted(specs, key=lambda s: s.class_label)
    labels_seen = set()
    for s in specs:
        s.validate()
        if s.class_label in labels_seen:
            raise SpecError(f"duplicate class_label {s.class_label}")
        labels_seen.add(s.class_label)
    if labels_seen != set(range(len(specs))):
        raise SpecError("class labels must be exactly 0..S-1")

    pairs = _pair_conflict_slots(specs)
    rng = np.random.default_rng(seed)

    next_id = 0
    # shared identities first, in pair order; home class is the lower label
    shared_by_class: dict[int, list[int]] = {s.class_label: [] for s in specs}
    shared_dirs = {}
    for lo, hi in pairs:
        ident = next_id
        next_id += 1
        shared_dirs[ident] = _draw_direction(rng, dim)
        shared_by_class[lo].append(ident)
        shared_by_class[hi].append(ident)

    xs, ys, ids = [], [], []
    for s in specs:
        shared = shared_by_class[s.class_label]
        n_own_clusters = s.k_clusters - len(shared)
        assert n_own_clusters >= 0  # guaranteed by C <= K and pairing
        cluster_idents = []
        for _ in range(n_own_clusters):
            ident = next_id
            next_id += 1
            shared_dirs[ident] = _draw_direction(rng, dim)
            cluster_idents.append(ident)
        cluster_idents.extend(shared)
        for ident in cluster_idents:
            for _ in range(s.samples_per_cluster):
                xs.append(_draw_sample(rng, shared_dirs[ident], concentration))
                ys.append(s.class_label)
                ids.append(ident)
        for _ in range(s.n_identities - s.k_clusters):
            ident = next_id
            next_id += 1
            direction = _draw_direction(rng, dim)
            xs.append(_draw_sample(rng, direction, concentration))
            ys.append(s.class_label)
            ids.append(ident)

    inputs = np.asarray(xs, dtype=np.float64)
    labels = np.asarray(ys, dtype=np.int64)
    idents = np.asarray(ids, dtype=np.int64)
    ds = Dataset(
        dim=dim,
        inputs=inputs,
        noisy_labels=labels,
        true_identity=idents,
        class_specs=list(specs),
        noise_ratio=0.0,
        seed=seed,
    )
    ds.noise_ratio = float(np.mean(corrupted_mask(ds))) if len(ds) else 0.0
    return ds


# ---------------------------------------------------------------------------
# auditing

def _class_identity_counts(ds: Dataset) -> dict:
    out: dict[int, dict[int, int]] = {}
    for label, ident in zip(ds.noisy_labels, ds.true_identity):
        out.setdefault(int(label), {})
        out[int(label)][int(ident)] = out[int(label)].get(int(ident), 0) + 1
    return out


def audit_dataset(ds: Dataset) -> dict:
    """Recompute per-class (N, K, C) from the ground-truth annotations."""
    counts = _class_identity_counts(ds)
    cluster_classes: dict[int, set] = {}
    for label, ic in counts.items():
        for ident, n in ic.items():
            if n >= 2:
                cluster_classes.setdefault(ident, set()).add(label)
    per_class = {}
    for s in ds.class_specs:
        ic = counts.get(s.class_label, {})
        n = len(ic)
        clusters = [i for i, cnt in ic.items() if cnt >= 2]
        k = len(clusters)
        c = sum(1 for i in clusters if len(cluster_classes.get(i, ())) > 1)
        per_class[s.class_label] = {"n": n, "k": k, "c": c}
    return per_class


def corrupted_mask(ds: Dataset) -> np.ndarray:
    """Per-sample corruption flags.

    A sample is corrupted when its identity is not the dominant identity of
    its class, or when its identity's cluster sits outside the identity's
    home class (the lowest label containing that identity).
    """
    counts = _class_identity_counts(ds)
    dominant = {}
    for label, ic in counts.items():
        best = max(ic.items(), key=lambda kv: (kv[1], -kv[0]))
        dominant[label] = best[0]
    home = {}
    cluster_classes: dict[int, set] = {}
    for label, ic in counts.items():
        for ident, n in ic.items():
            home[ident] = min(home.get(ident, label), label)
            if n >= 2:
                cluster_classes.setdefault(ident, set()).add(label)
    mask = np.zeros(len(ds), dtype=bool)
    for i in range(len(ds)):
        label = int(ds.noisy_labels[i])
        ident = int(ds.true_identity[i])
        if ident != dominant[label]:
            mask[i] = True
            continue
        in_cluster_here = label in cluster_classes.get(ident, ())
        conflicted = len(cluster_classes.get(ident, ())) > 1
        if in_cluster_here and conflicted and label != home[ident]:
            mask[i] = True
    return mask


def outlier_mask(ds: Dataset) -> np.ndarray:
    """True for samples that are singletons within their annotated class."""
    counts = _class_identity_counts(ds)
    mask = np.zeros(len(ds), dtype=bool)
    for i in range(len(ds)):
        label = int(ds.noisy_labels[i])
        ident = int(ds.true_identity[i])
        mask[i] = counts[label][ident] == 1
    return mask


def conflict_class_pairs(ds: Dataset) -> set:
    """Unordered pairs of class labels sharing a valid-cluster identity."""
    counts = _class_identity_counts(ds)
    cluster_classes: dict[int, set] = {}
    for label, ic in counts.items():
        for ident, n in ic.items():
            if n >= 2:
                cluster_classes.setdefault(ident, set()).add(label)
    pairs = set()
    for classes in cluster_classes.values():
        cl = sorted(classes)
        for i in range(len(cl)):
            for j in range(i + 1, len(cl)):
                pairs.add((cl[i], cl[j]))
    return pairs


def split_holdout(ds: Dataset, fraction: float = 0.2) -> np.ndarray:
    """Held-out mask: the trailing `fraction` of each valid cluster's samples.

    Singleton (outlier) samples are never held out.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    mask = np.zeros(len(ds), dtype=bool)
    if fraction == 0.0:
        return mask
    groups: dict[tuple, list] = {}
    for i in range(len(ds)):
        groups.setdefault((int(ds.noisy_labels[i]), int(ds.true_identity[i])), []).append(i)
    for idxs in groups.values():
        if len(idxs) < 2:
            continue
        n_hold = int(math.floor(fraction * len(idxs)))
        for i in idxs[len(idxs) - n_hold:]:
            mask[i] = True
    return mask


# ---------------------------------------------------------------------------
# presets (desk scale: S=20 classes, d=16 by default)

def preset_clean(n_classes: int = 20, samples_per_cluster: int = 40):
    return [
        NkcClassSpec(j, 1, 1, 0, samples_per_cluster) for j in range(n_classes)
    ]


def preset_intra_only(n_classes: int = 20, samples_per_cluster: int = 40):
    """C = 0 with mixed N/K: cycles K in 1..3 and adds a couple of outliers."""
    specs = []
    for j in range(n_classes):
        k = 1 + j % 3
        n = k + (j % 2)  # every other class carries one singleton outlier
        specs.append(NkcClassSpec(j, n, k, 0, samples_per_cluster))
    return specs


def preset_inter_only(n_classes: int = 20, samples_per_cluster: int = 40, n_pairs: int = 4):
    """N = K = 1 everywhere; the first 2*n_pairs classes share identities pairwise."""
    if 2 * n_pairs > n_classes:
        raise SpecError("n_pairs too large for n_classes")
    specs = []
    for j in range(n_classes):
        c = 1 if j < 2 * n_pairs else 0
        specs.append(NkcClassSpec(j, 1, 1, c, samples_per_cluster))
    return specs


def preset_k_recovery(n_classes: int = 20, samples_per_cluster: int = 40):
    """C = 0, N = K cycling through 1..4."""
    return [
        NkcClassSpec(j, 1 + j % 4, 1 + j % 4, 0, samples_per_cluster)
        for j in range(n_classes)
    ]


def preset_outlier(n_classes: int = 28, samples_per_cluster: int = 40,
                   singleton_classes: int = 4, outliers_per_class: int = 0,
                   singletons_per_empty_class: int = 60):
    """20% singleton outliers; the last classes hold only singletons (K = 0).

    With the defaults: 24 clean one-cluster classes of 40 samples plus 4
    classes of 60 singletons each, i.e. 240 outliers in 1200 samples.
    """
    specs = []
    for j in range(n_classes - singleton_classes):
        specs.append(NkcClassSpec(j, 1 + outliers_per_class, 1, 0, samples_per_cluster))
    for j in range(n_classes - singleton_classes, n_classes):
        specs.append(NkcClassSpec(j, singletons_per_empty_class, 0, 0, samples_per_cluster))
    return specs


def preset_conflict(n_classes: int = 20, samples_per_cluster: int = 40, n_pairs: int = 4):
    """25% of identities split across two classes (with the defaults)."""
    return preset_inter_only(n_classes, samples_per_cluster, n_pairs)


def preset_mixture(noise_ratio: float, n_classes: int = 20, samples_per_cluster: int = 40):
    """Blend of conflict pairs, extra intra-class clusters and singleton outliers
    whose measured corruption fraction lands within 1/|dataset| of the target."""
    if not 0.0 <= noise_ratio < 1.0:
        raise SpecError("noise_ratio must be in [0, 1)")
    if noise_ratio == 0.0:
        return preset_clean(n_classes, samples_per_cluster)
    b = samples_per_cluster
    n_pairs = max(1, int(n_classes * noise_ratio / 4))
    n_intra = max(1, int(n_classes * noise_ratio / 4))
    if 2 * n_pairs + n_intra > n_classes:
        raise SpecError("n_classes too small for the requested mixture")
    kinds = []
    for j in range(n_classes):
        if j < 2 * n_pairs:
            kinds.append("pair")
        elif j < 2 * n_pairs + n_intra:
            kinds.append("intra")
        else:
            kinds.append("clean")
    # corruption so far: the higher class of each pair (b samples) and the
    # second cluster of each intra class (b samples)
    corrupted = n_pairs * b + n_intra * b
    total = (2 * n_pairs * b       # pair classes: one cluster each
             + n_intra * 2 * b     # intra classes: two clusters each
             + (n_classes - 2 * n_pairs - n_intra) * b)
    # top up with singleton outliers: each adds one corrupted / one total
    need = (noise_ratio * total - corrupted) / (1.0 - noise_ratio)
    n_outliers = max(0, int(round(need)))
    extra = [0] * n_classes
    for t in range(n_outliers):
        extra[t % n_classes] += 1
    specs = []
    for j in range(n_classes):
        o = extra[j]
        if kinds[j] == "pair":
            specs.append(NkcClassSpec(j, 1 + o, 1, 1, b))
        elif kinds[j] == "intra":
            specs.append(NkcClassSpec(j, 2 + o, 2, 0, b))
        else:
            specs.append(NkcClassSpec(j, 1 + o, 1, 0, b))
    return specs


PRESETS = {
    "clean": lambda **kw: preset_clean(**kw),
    "intra_only": lambda **kw: preset_intra_only(**kw),
    "inter_only": lambda **kw: preset_inter_only(**kw),
    "mixture": lambda **kw: preset_mixture(**kw),
    "k_recovery": lambda **kw: preset_k_recovery(**kw),
    "outlier": lambda **kw: preset_outlier(**kw),
    "conflict": lambda **kw: preset_conflict(**kw),
}
