"""Margin-softmax primitives and the masked sub-center loss.

The unified positive logit is s * (m1 * cos(theta + m2) - m3); negatives use
s * cos(theta). The sub-center variant keeps a bank of weight vectors per
class, assigns each sample to its nearest same-class sub-center, and drops
negative sub-centers whose cosine exceeds a per-sub-center ignore threshold
from the softmax denominator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COS_CLAMP = 1.0 - 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class MarginConfig:
    scale: float = 64.0
    m1: float = 1.0
    m2: float = 0.5
    m3: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.m1 < 1 or self.m2 < 0 or self.m3 < 0:
            raise ValueError("margins must satisfy m1 >= 1, m2 >= 0, m3 >= 0")

    @classmethod
    def arcface(cls, scale: float = 64.0, m2: float = 0.5) -> "MarginConfig":
        return cls(scale=scale, m1=1.0, m2=m2, m3=0.0)

    @classmethod
    def cosface(cls, scale: float = 64.0, m3: float = 0.35) -> "MarginConfig":
        return cls(scale=scale, m1=1.0, m2=0.0, m3=m3)

    @classmethod
    def plain(cls, scale: float = 64.0) -> "MarginConfig":
        return cls(scale=scale, m1=1.0, m2=0.0, m3=0.0)


def margin_logit(cos_theta: float, cfg: MarginConfig) -> float:
    """Positive-class logit s * (m1 * cos(theta + m2) - m3)."""
    c = min(max(cos_theta, -COS_CLAMP), COS_CLAMP)
    theta = math.acos(c)
    return cfg.scale * (cfg.m1 * math.cos(theta + cfg.m2) - cfg.m3)


def negative_logit(cos_theta: float, cfg: MarginConfig) -> float:
    return cfg.scale * cos_theta


@dataclass
class SubCenter:
    uid: int
    weight: np.ndarray  # stored unnormalized; normalized on the fly
    active: bool = True


class SubCenterBank:
    """Per-class lists of learnable sub-center directions."""

    def __init__(self):
        self.centers: dict[int, list[SubCenter]] = {}
        self._next_uid = 0

    @classmethod
    def init_random(cls, n_classes: int, m_init: int, dim: int,
                    rng: np.random.Generator) -> "SubCenterBank":
        bank = cls()
        for j in range(n_classes):
            bank.centers[j] = []
            for _ in range(m_init):
                w = rng.standard_normal(dim)
                bank.add_center(j, w / np.linalg.norm(w))
        return bank

    def add_center(self, label: int, weight: np.ndarray) -> SubCenter:
        sc = SubCenter(uid=self._next_uid, weight=np.asarray(weight, dtype=np.float64).copy())
        self._next_uid += 1
        self.centers.setdefault(label, []).append(sc)
        return sc

    def active_centers(self, label: int) -> list:
        return [c for c in self.centers.get(label, []) if c.active]

    def n_active(self, label: int) -> int:
        return len(self.active_centers(label))

    def all_active(self) -> list:
        out = []
        for label in sorted(self.centers):
            for c in self.centers[label]:
                if c.active:
                    out.append((label, c))
        return out

    def find(self, uid: int):
        for label, cs in self.centers.items():
            for c in cs:
                if c.uid == uid:
                    return label, c
        raise KeyError(uid)

    def deactivate(self, uid: int) -> None:
        _, c = self.find(uid)
        c.active = False

    def move_class(self, src: int, dst: int) -> None:
        """Reattach all of src's active sub-centers to class dst."""
        if src == dst:
            return
        keep, move = [], []
        for c in self.centers.get(src, []):
            (move if c.active else keep).append(c)
        self.centers[src] = keep
        self.centers.setdefault(dst, []).extend(move)

    def matrices(self):
        """Stacked view of all active centers: (W, labels, uids)."""
        labels, uids, rows = [], [], []
        for label, c in self.all_active():
            labels.append(label)
            uids.append(c.uid)
            rows.append(c.weight)
        if not rows:
            return (np.zeros((0, 0)), np.asarray([], dtype=np.int64),
                    np.asarray([], dtype=np.int64))
        return (np.stack(rows), np.asarray(labels, dtype=np.int64),
                np.asarray(uids, dtype=np.int64))


def cosines(x: np.ndarray, bank: SubCenterBank) -> tuple:
    """Cosine of x against every active sub-center.

    Returns (values, labels, uids) aligned with the bank's active order.
    """
    x = np.asarray(x, dtype=np.float64)
    nx = np.linalg.norm(x)
    if not np.all(np.isfinite(x)) or nx == 0.0:
        raise LossError("feature vector must be finite and nonzero")
    w, labels, uids = bank.matrices()
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    return wn @ (x / nx), labels, uids


def assign_subcenter(x: np.ndarray, class_label: int, bank: SubCenterBank):
    """Index (within the class's active list) of the nearest sub-center.

    Returns None when the class has no active sub-center (sample ignored).
    """
    centers = bank.active_centers(class_label)
    if not centers:
        return None
    x = np.asarray(x, dtype=np.float64)
    xn = x / np.linalg.norm(x)
    best_m, best_cos = 0, -np.inf
    for m, c in enumerate(centers):
        cv = float(np.dot(c.weight, xn) / np.linalg.norm(c.weight))
        if cv > best_cos:
            best_m, best_cos = m, cv
    return best_m


def esl_loss_and_grads(features: np.ndarray, labels: np.ndarray,
                       bank: SubCenterBank, thresholds, cfg: MarginConfig):
    """Masked sub-center margin-softmax loss with analytic gradients.

    features: (n, D) raw (unnormalized) embeddings; labels: (n,) current
    class labels, each with at least one active sub-center; thresholds:
    dict uid -> ignore threshold, or None to disable masking.

    Returns (loss, grad_features, grad_weights, assignments) where loss is
    the batch mean, grad_weights maps uid -> gradient of the stored
    (unnormalized) weight, and assignments is a list of (uid, cos) per
    sample for the statistics update. The ignore mask and the sub-center
    assignment are treated as constants of the step.
    """
    Z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = Z.shape[0]
    if n == 0:
        raise LossError("empty batch")
    W, sc_labels, uids = bank.matrices()
    if W.shape[0] == 0:
        raise LossError("bank has no active sub-centers")
    k = W.shape[0]

    znorm = np.linalg.norm(Z, axis=1)
    if np.any(znorm == 0.0) or not np.all(np.isfinite(Z)):
        raise LossError("features must be finite and nonzero")
    Zn = Z / znorm[:, None]
    wnorm = np.linalg.norm(W, axis=1)
    Wn = W / wnorm[:, None]
    C = Zn @ Wn.T  # (n, k)

    s, m1, m2, m3 = cfg.scale, cfg.m1, cfg.m2, cfg.m3

    # nearest same-class sub-center per sample
    same = sc_labels[None, :] == y[:, None]  # (n, k)
    if not np.all(same.any(axis=1)):
        bad = int(np.nonzero(~same.any(axis=1))[0][0])
        raise LossError(f"sample {bad}: class {int(y[bad])} has no active sub-center")
    masked_cos = np.where(same, C, -np.inf)
    pos_idx = np.argmax(masked_cos, axis=1)  # first max wins ties (lowest index)
    rows = np.arange(n)
    cpos = C[rows, pos_idx]

    # positive logit through the clamped arccos
    cc = np.clip(cpos, -COS_CLAMP, COS_CLAMP)
    theta = np.arccos(cc)
    fpos = s * (m1 * np.cos(theta + m2) - m3)
    # d fpos / d cos; zero where the clamp is active
    inside = (cpos > -COS_CLAMP) & (cpos < COS_CLAMP)
    dfpos = np.where(inside, s * m1 * np.sin(theta + m2) / np.sin(theta), 0.0)

    logits = s * C  # negatives
    include = np.ones((n, k), dtype=bool)
    if thresholds is not None:
        tvec = np.array([thresholds.get(int(u), np.inf) for u in uids])
        include = ~(C > tvec[None, :])
    include[rows, pos_idx] = False  # handled via fpos
    # other sub-centers of the sample's own class stay in the denominator
    # as plain negatives (maskable)

    exp_neg = np.where(include, np.exp(logits), 0.0)
    exp_pos = np.exp(fpos)
    Ztot = exp_pos + exp_neg.sum(axis=1)
    if not np.all(np.isfinite(Ztot)) or np.any(Ztot <= 0.0):
        bad = int(np.nonzero(~np.isfinite(Ztot) | (Ztot <= 0.0))[0][0])
        raise LossError(f"sample {bad}: non-finite softmax normalizer")
    loss_i = -(fpos - np.log(Ztot))
    loss = float(np.mean(loss_i))
    if not math.isfinite(loss):
        raise LossError("non-finite loss")

    # dL/dcos for every (sample, sub-center), batch-mean folded in
    G = (exp_neg / Ztot[:, None]) * s
    ppos = exp_pos / Ztot
    G[rows, pos_idx] = (ppos - 1.0) * dfpos
    G /= n

    # chain through the two normalizations
    gc = np.sum(G * C, axis=1)
    grad_Z = (G @ Wn - gc[:, None] * Zn) / znorm[:, None]
    gw = np.sum(G * C, axis=0)
    grad_W_mat = (G.T @ Zn - gw[:, None] * Wn) / wnorm[:, None]
    grad_W = {int(uids[t]): grad_W_mat[t] for t in range(k)}

    # rounding can push a perfect match a few ulp past 1
    cpos_clipped = np.clip(cpos, -1.0, 1.0)
    assignments = [(int(uids[pos_idx[i]]), float(cpos_clipped[i])) for i in range(n)]
    return loss, grad_Z, grad_W, assignments
