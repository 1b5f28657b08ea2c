"""Mini-batch SGD on an encoder plus sub-center bank, interleaved with the
per-epoch statistics refresh and sub-center evolution."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import synth
from .evolution import EpochCache, EvolutionConfig, LabelMap, evolve_epoch
from .margin_loss import LossError, MarginConfig, SubCenterBank, esl_loss_and_grads
from .stats import CosineStatsAccumulator, finalize, thresholds_from


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    lr_schedule: tuple = ((25, 0.1), (35, 0.1))  # (epoch, multiplier) pairs
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    margin: MarginConfig = field(default_factory=MarginConfig.arcface)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    encoder_mode: str = "linear"  # "linear" | "frozen"
    embed_dim: int = 16
    mask_enabled: bool = True
    evolution_enabled: bool = True
    holdout_fraction: float = 0.2
    record_step_losses: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size >= 1 and lr > 0 required")
        epochs_in_sched = [e for e, _ in self.lr_schedule]
        if epochs_in_sched != sorted(set(epochs_in_sched)):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if self.encoder_mode not in ("linear", "frozen"):
            raise ValueError("encoder_mode must be 'linear' or 'frozen'")

    def hash(self) -> str:
        d = asdict(self)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]

    @classmethod
    def calibrated(cls, **overrides) -> "TrainConfig":
        """Schedule and widths tuned for the low-dimensional synthetic regime.

        Pairs EvolutionConfig.calibrated() with a low-then-high learning
        rate: the first epochs run at lr 0.02 so same-class sub-centers are
        not repelled apart before the first ignore thresholds exist, then
        the rate steps up 5x once masking is in place.

        The producing width depends on the encoder mode. With frozen
        features the per-epoch cosine tail is pure geometry, and a
        sensitive lambda2 = 2.3 is needed to split minority modes. With a
        trainable encoder the features move between epochs, so part of the
        tail is motion artifact; lambda2 = 2.8 avoids splitting on it.
        """
        base = dict(lr=0.02, lr_schedule=((4, 5.0), (25, 0.1), (35, 0.1)))
        base.update(overrides)
        if "evolution" not in base:
            lam2 = 2.3 if base.get("encoder_mode", "linear") == "frozen" else 2.8
            base["evolution"] = EvolutionConfig.calibrated(lambda2=lam2)
        return cls(**base)

    @classmethod
    def baseline(cls, **overrides) -> "TrainConfig":
        """Plain single-center margin softmax: mask off, M=1, evolution off."""
        base = dict(mask_enabled=False, evolution_enabled=False)
        base.update(overrides)
        cfg = cls(**base)
        ev = EvolutionConfig(
            lambda1=cfg.evolution.lambda1, lambda2=cfg.evolution.lambda2,
            lambda3=cfg.evolution.lambda3, lambda4=cfg.evolution.lambda4,
            m_init=1, epsilon_start=cfg.evolution.epsilon_start,
            total_epochs=cfg.evolution.total_epochs)
        object.__setattr__(cfg, "evolution", ev)
        return cfg


@dataclass
class TrainState:
    encoder: np.ndarray  # (d, D); identity-like stand-in for a deep backbone
    bank: SubCenterBank
    label_map: LabelMap
    epoch: int = 0
    metrics: list = field(default_factory=list)
    events: list = field(default_factory=list)
    thresholds: dict | None = None
    stats: dict = field(default_factory=dict)
    step_losses: list = field(default_factory=list)
    vel_encoder: np.ndarray | None = None
    vel_weights: dict = field(default_factory=dict)


def init_state(dataset: synth.Dataset, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 0xE51])
    d, D = dataset.dim, cfg.embed_dim
    if cfg.encoder_mode == "frozen" and d != D:
        raise ValueError("frozen-features mode requires embed_dim == input dim")
    if d == D:
        A = np.eye(d)
    else:
        A = rng.standard_normal((d, D)) / np.sqrt(d)
    bank = SubCenterBank.init_random(dataset.n_classes, cfg.evolution.m_init, D, rng)
    lm = LabelMap(dataset.n_classes, len(dataset))
    return TrainState(encoder=A, bank=bank, label_map=lm,
                      vel_encoder=np.zeros_like(A))


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float):
    """Classic momentum SGD with L2 weight decay folded into the gradient."""
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


def settled_assignments(Z: np.ndarray, y: np.ndarray, bank: SubCenterBank):
    """Nearest same-class sub-center for each sample under the current bank.

    Returns per-sample (uid, cos) pairs computed in one pass with the
    weights at rest, so the per-epoch statistics reflect the settled
    geometry rather than mid-update snapshots.
    """
    W, sc_labels, uids = bank.matrices()
    Zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    Wn = W / np.linalg.norm(W, axis=1, keepdims=True)
    C = Zn @ Wn.T
    same = sc_labels[None, :] == y[:, None]
    masked = np.where(same, C, -np.inf)
    pos = np.argmax(masked, axis=1)
    cos = np.clip(C[np.arange(len(y)), pos], -1.0, 1.0)
    return [(int(uids[pos[i]]), float(cos[i])) for i in range(len(y))]


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr
    for e, mult in cfg.lr_schedule:
        if epoch >= e:
            lr *= mult
    return lr


def train(dataset: synth.Dataset, cfg: TrainConfig,
          state: TrainState | None = None) -> TrainState:
    """Run (or resume) the full training schedule and return the final state."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if state is None:
        state = init_state(dataset, cfg)
    holdout = synth.split_holdout(dataset, cfg.holdout_fraction)

    for epoch in range(state.epoch, cfg.epochs):
        lr = lr_at(cfg, epoch)
        mapped = state.label_map.apply(dataset.noisy_labels)
        class_ok = np.array([state.bank.n_active(int(c)) > 0
                             for c in range(dataset.n_classes)])
        # a class can disappear entirely via dropping; its samples are ignored
        eligible = np.nonzero(~state.label_map.dropped & ~holdout
                              & class_ok[mapped])[0]
        if len(eligible) == 0:
            raise DivergenceError(f"epoch {epoch}: no trainable samples left")
        rng = np.random.default_rng([cfg.seed, epoch])
        order = eligible[rng.permutation(len(eligible))]

        thresholds = state.thresholds if cfg.mask_enabled else None
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            X = dataset.inputs[idx]
            y = mapped[idx]
            if cfg.encoder_mode == "frozen":
                Z = X
            else:
                Z = X @ state.encoder
            try:
                loss, grad_Z, grad_W, assigns = esl_loss_and_grads(
                    Z, y, state.bank, thresholds, cfg.margin)
            except LossError as e:
                raise DivergenceError(f"epoch {epoch}: {e}") from e
            losses.append(loss)
            if cfg.record_step_losses:
                state.step_losses.append(loss)

            if cfg.encoder_mode == "linear":
                grad_A = X.T @ grad_Z
                state.encoder, state.vel_encoder = sgd_step(
                    state.encoder, grad_A, state.vel_encoder,
                    lr, cfg.momentum, cfg.weight_decay)
            for label, c in state.bank.all_active():
                g = grad_W.get(c.uid)
                if g is None:
                    continue
                vel = state.vel_weights.get(c.uid)
                if vel is None:
                    vel = np.zeros_like(c.weight)
                c.weight, state.vel_weights[c.uid] = sgd_step(
                    c.weight, g, vel, lr, cfg.momentum, cfg.weight_decay)

        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"epoch {epoch}: non-finite mean loss")

        # statistics come from a settled pass after the updates, per the
        # update-then-measure step order
        acc = CosineStatsAccumulator()
        cache = EpochCache()
        X_ep = dataset.inputs[order]
        Z_ep = X_ep if cfg.encoder_mode == "frozen" else X_ep @ state.encoder
        assigns = settled_assignments(Z_ep, mapped[order], state.bank)
        acc.accumulate(assigns)
        cache.add(order, assigns, Z_ep)

        active_uids = [c.uid for _, c in state.bank.all_active()]
        stats = finalize(acc, cfg.evolution.lambda1, uids=active_uids)
        state.stats = stats

        ev_counts = {"produce": 0, "drop": 0, "merge": 0}
        if cfg.evolution_enabled and epoch >= cfg.evolution.epsilon_start:
            events = evolve_epoch(state.bank, stats, cache, cfg.evolution,
                                  state.label_map, epoch)
            for e in events:
                ev_counts[e["op"]] += 1
            state.events.extend(events)
        # thresholds for the next epoch come from this epoch's statistics;
        # sub-centers created by evolution have none yet (never mask)
        surviving = {c.uid for _, c in state.bank.all_active()}
        state.thresholds = {u: t for u, t in thresholds_from(stats).items()
                            if u in surviving}

        state.metrics.append({
            "epoch": epoch,
            "loss": epoch_loss,
            "lr": lr,
            "n_trained": len(order),
            "n_dropped": int(np.sum(state.label_map.dropped)),
            "n_active_centers": len(surviving),
            "n_classes": len({state.label_map.current(j)
                              for j in range(dataset.n_classes)
                              if state.bank.n_active(state.label_map.current(j)) > 0}),
            "produced": ev_counts["produce"],
            "dropped_centers": ev_counts["drop"],
            "merged": ev_counts["merge"],
        })
        state.epoch = epoch + 1
    return state


def embed(state: TrainState, X: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Unit-norm embeddings of raw inputs under the trained encoder."""
    Z = X if cfg.encoder_mode == "frozen" else X @ state.encoder
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpointing (epoch-boundary resume)

def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str) -> None:
    d = {
        "config_hash": cfg.hash(),
        "epoch": state.epoch,
        "encoder": state.encoder.tolist(),
        "next_uid": state.bank._next_uid,
        "bank": [
            {"label": label, "uid": c.uid, "active": c.active,
             "weight": c.weight.tolist()}
            for label in sorted(state.bank.centers)
            for c in state.bank.centers[label]
        ],
        "label_map": {str(k): v for k, v in state.label_map.mapping.items()},
        "dropped": np.nonzero(state.label_map.dropped)[0].tolist(),
        "n_samples": len(state.label_map.dropped),
        "thresholds": {str(k): v for k, v in (state.thresholds or {}).items()},
        "metrics": state.metrics,
        "events": state.events,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(d, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> TrainState:
    with open(path) as f:
        d = json.load(f)
    bank = SubCenterBank()
    for item in d["bank"]:
        bank.centers.setdefault(item["label"], [])
    for item in d["bank"]:
        sc = bank.add_center(item["label"], np.asarray(item["weight"]))
        sc.uid = item["uid"]
        sc.active = item["active"]
    bank._next_uid = d["next_uid"]
    n_classes = len(d["label_map"])
    lm = LabelMap(n_classes, d["n_samples"])
    lm.mapping = {int(k): v for k, v in d["label_map"].items()}
    lm.mark_dropped(d["dropped"]) if d["dropped"] else None
    state = TrainState(
        encoder=np.asarray(d["encoder"]),
        bank=bank,
        label_map=lm,
        epoch=d["epoch"],
        metrics=d["metrics"],
        events=d["events"],
        thresholds={int(k): v for k, v in d["thresholds"].items()} or None,
    )
    state.vel_encoder = np.zeros_like(state.encoder)
    return state
