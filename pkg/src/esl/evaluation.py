"""Metrics tying a trained state back to the generator's ground truth."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from . import synth, trainer
from .margin_loss import SubCenterBank

DEFAULT_FAR_GRID = (1e-1, 1e-2, 1e-3)


def verification_eval(embeddings: np.ndarray, identities: np.ndarray,
                      far_grid=DEFAULT_FAR_GRID, max_pairs: int | None = None,
                      seed: int = 0) -> dict:
    """TAR at each FAR from all (or sampled) cosine verification pairs.

    The acceptance threshold at a given FAR is the k-th largest negative-pair
    score with k = floor(FAR * n_neg); a FAR below 1/n_neg is unreachable and
    reported as None.
    """
    ids = np.asarray(identities)
    if len(set(ids.tolist())) < 2:
        raise ValueError("need at least 2 identities for verification pairs")
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    n = len(emb)
    iu, ju = np.triu_indices(n, k=1)
    if max_pairs is not None and len(iu) > max_pairs:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(iu), size=max_pairs, replace=False)
        iu, ju = iu[pick], ju[pick]
    scores = np.sum(emb[iu] * emb[ju], axis=1)
    positive = ids[iu] == ids[ju]
    pos = scores[positive]
    neg = scores[~positive]
    n_pos, n_neg = len(pos), len(neg)
    out = {"n_pos_pairs": int(n_pos), "n_neg_pairs": int(n_neg), "tar": {}}
    neg_sorted = np.sort(neg)[::-1]
    for far in far_grid:
        k = int(math.floor(far * n_neg))
        if k < 1 or n_pos == 0:
            out["tar"][far] = None
            continue
        threshold = neg_sorted[k - 1]
        out["tar"][far] = float(np.mean(pos > threshold))
    return out


def cleaning_eval(label_map, dataset: synth.Dataset) -> dict:
    """Precision/recall of dropping (vs true outliers) and merging (vs true
    cross-class identity conflicts). Empty denominators count as 1.0."""
    outliers = synth.outlier_mask(dataset)
    dropped = label_map.dropped
    tp_drop = int(np.sum(dropped & outliers))
    n_drop = int(np.sum(dropped))
    n_out = int(np.sum(outliers))
    drop_precision = tp_drop / n_drop if n_drop else 1.0
    drop_recall = tp_drop / n_out if n_out else 1.0

    true_pairs = synth.conflict_class_pairs(dataset)
    merged_pairs = set()
    by_target: dict[int, list] = {}
    for orig, cur in label_map.mapping.items():
        by_target.setdefault(cur, []).append(orig)
    for group in by_target.values():
        group = sorted(group)
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                merged_pairs.add((group[a], group[b]))
    tp_merge = len(true_pairs & merged_pairs)
    merge_precision = tp_merge / len(merged_pairs) if merged_pairs else 1.0
    merge_recall = tp_merge / len(true_pairs) if true_pairs else 1.0
    return {
        "drop_precision": drop_precision, "drop_recall": drop_recall,
        "merge_precision": merge_precision, "merge_recall": merge_recall,
        "counts": {
            "dropped": n_drop, "true_outliers": n_out, "drop_tp": tp_drop,
            "merged_pairs": len(merged_pairs), "true_conflict_pairs": len(true_pairs),
            "merge_tp": tp_merge,
        },
    }


def clustering_eval(embeddings: np.ndarray, identities: np.ndarray,
                    bank: SubCenterBank) -> dict:
    """Purity and NMI of the nearest-sub-center assignment vs true identity."""
    W, _, uids = bank.matrices()
    if W.shape[0] == 0:
        return {"purity": 0.0, "nmi": 0.0}
    Wn = W / np.linalg.norm(W, axis=1, keepdims=True)
    emb = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    assign = np.argmax(emb @ Wn.T, axis=1)
    total = 0
    for a in np.unique(assign):
        members = identities[assign == a]
        _, counts = np.unique(members, return_counts=True)
        total += int(counts.max())
    purity = total / len(identities)
    nmi = float(normalized_mutual_info_score(identities, assign))
    return {"purity": purity, "nmi": nmi}


def recovered_k(state: trainer.TrainState, dataset: synth.Dataset) -> dict:
    """Per original class: final active sub-center count vs audited true K."""
    audit = synth.audit_dataset(dataset)
    out = {}
    for spec in dataset.class_specs:
        j = spec.class_label
        cur = state.label_map.current(j)
        out[j] = {"true_k": audit[j]["k"],
                  "active": state.bank.n_active(cur),
                  "current_label": cur}
    return out


@dataclass
class MetricReport:
    verification: dict = field(default_factory=dict)
    cleaning: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=dict)
    recovered: dict = field(default_factory=dict)
    per_epoch: list = field(default_factory=list)

    def to_json(self, path: str) -> None:
        payload = {
            "verification": self.verification,
            "cleaning": self.cleaning,
            "clustering": self.clustering,
            "recovered": {str(k): v for k, v in self.recovered.items()},
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f, indent=1, default=_json_default)
        os.replace(tmp, path)

    def to_csv(self, path: str) -> None:
        """One row per training epoch plus one summary row."""
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["row", "epoch", "loss", "n_active_centers",
                             "n_dropped", "tar@1e-1", "tar@1e-2", "tar@1e-3",
                             "drop_precision", "drop_recall",
                             "merge_precision", "merge_recall", "purity", "nmi"])
            for m in self.per_epoch:
                writer.writerow(["epoch", m["epoch"], repr(m["loss"]),
                                 m["n_active_centers"], m["n_dropped"],
                                 "", "", "", "", "", "", "", "", ""])
            tar = self.verification.get("tar", {})
            writer.writerow([
                "summary", "", "", "", "",
                _fmt(tar.get(1e-1)), _fmt(tar.get(1e-2)), _fmt(tar.get(1e-3)),
                _fmt(self.cleaning.get("drop_precision")),
                _fmt(self.cleaning.get("drop_recall")),
                _fmt(self.cleaning.get("merge_precision")),
                _fmt(self.cleaning.get("merge_recall")),
                _fmt(self.clustering.get("purity")),
                _fmt(self.clustering.get("nmi")),
            ])
        os.replace(tmp, path)


def _fmt(v):
    return "" if v is None else repr(float(v))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def evaluate_run(dataset: synth.Dataset, state: trainer.TrainState,
                 cfg: trainer.TrainConfig,
                 far_grid=DEFAULT_FAR_GRID) -> MetricReport:
    holdout = synth.split_holdout(dataset, cfg.holdout_fraction)
    report = MetricReport(per_epoch=state.metrics)
    if np.any(holdout):
        emb = trainer.embed(state, dataset.inputs[holdout], cfg)
        report.verification = verification_eval(
            emb, dataset.true_identity[holdout], far_grid, seed=cfg.seed)
        report.clustering = clustering_eval(
            emb, dataset.true_identity[holdout], state.bank)
    report.cleaning = cleaning_eval(state.label_map, dataset)
    report.recovered = recovered_k(state, dataset)
    return report


def scenario_matrix(results: dict) -> list:
    """Pass/fail table over the per-scenario acceptance thresholds.

    results: scenario name -> MetricReport (or None when the run is absent).
    """
    checks = {
        "clean": lambda r: _k_match_rate(r) >= 0.90,
        "k_recovery": lambda r: _k_match_rate(r) >= 0.90,
        "outlier": lambda r: (r.cleaning["drop_recall"] >= 0.85
                              and r.cleaning["drop_precision"] >= 0.85),
        "conflict": lambda r: (r.cleaning["merge_recall"] >= 0.85
                               and r.cleaning["merge_precision"] >= 0.90),
        "mixture": lambda r: r.verification.get("tar", {}).get(1e-2) is not None,
    }
    rows = []
    for name, report in results.items():
        if report is None:
            rows.append({"scenario": name, "status": "absent"})
            continue
        check = checks.get(name)
        if check is None:
            rows.append({"scenario": name, "status": "unknown"})
            continue
        rows.append({"scenario": name,
                     "status": "pass" if check(report) else "fail"})
    return rows


def _k_match_rate(report: MetricReport) -> float:
    items = list(report.recovered.values())
    ok = sum(1 for v in items if v["active"] == v["true_k"])
    return ok / len(items) if items else 0.0
