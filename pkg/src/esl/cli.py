"""Command-line front door: gen / train / eval / sweep."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evaluation, synth, trainer
from .evolution import EvolutionConfig
from .margin_loss import MarginConfig

log = logging.getLogger("esl")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3

DATASET_DEFAULTS = {
    "preset": "mixture",
    "noise_ratio": 0.5,
    "n_classes": 20,
    "samples_per_cluster": 40,
    "dim": 16,
    "concentration": 100.0,
    "seed": 7,
}

# the widths mirror EvolutionConfig.calibrated() / TrainConfig.calibrated()
# (low-dimensional regime); the class-level defaults target d in the hundreds
TRAIN_DEFAULTS = {
    "epochs": 40,
    "batch_size": 128,
    "lr": 0.02,
    "lr_schedule": [[4, 5.0], [25, 0.1], [35, 0.1]],
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "seed": 0,
    "scale": 64.0,
    "m1": 1.0,
    "m2": 0.5,
    "m3": 0.0,
    "lambda1": -1.0,
    "lambda2": 2.8,
    "lambda3": 0.45,
    "lambda4": 0.0,
    "m_init": 3,
    "min_support": 2,
    "epsilon_start": 2,
    "encoder_mode": "linear",
    "embed_dim": 16,
    "mask_enabled": True,
    "evolution_enabled": True,
    "holdout_fraction": 0.2,
}

EVAL_DEFAULTS = {"far_grid": [1e-1, 1e-2, 1e-3]}


class InputError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("ESL_LOG", "off").lower()
    if level == "off":
        logging.disable(logging.CRITICAL)
    else:
        logging.basicConfig(
            level=logging.DEBUG if level == "debug" else logging.INFO,
            format="%(asctime)s %(name)s %(levelname)s %(message)s")


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise InputError(f"config {path} is not valid JSON: {e}") from e


def resolve_config(raw: dict, args) -> dict:
    cfg = {
        "dataset": {**DATASET_DEFAULTS, **raw.get("dataset", {})},
        "dataset_path": raw.get("dataset_path", "dataset.json"),
        "checkpoint_path": raw.get("checkpoint_path", "checkpoint.json"),
        "train": {**TRAIN_DEFAULTS, **raw.get("train", {})},
        "eval": {**EVAL_DEFAULTS, **raw.get("eval", {})},
    }
    if getattr(args, "seed", None) is not None:
        cfg["dataset"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    return cfg


def echo_config(cfg: dict, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    _atomic_json(cfg, os.path.join(outdir, "config.resolved.json"))


def _atomic_json(obj, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=1)
    os.replace(tmp, path)


def build_specs(dcfg: dict):
    preset = dcfg["preset"]
    if preset not in synth.PRESETS:
        raise InputError(f"unknown preset {preset!r}; choose from {sorted(synth.PRESETS)}")
    kw = {"n_classes": dcfg["n_classes"],
          "samples_per_cluster": dcfg["samples_per_cluster"]}
    if preset == "mixture":
        kw["noise_ratio"] = dcfg["noise_ratio"]
    try:
        return synth.PRESETS[preset](**kw)
    except synth.SpecError as e:
        raise InputError(str(e)) from e


def train_config(tcfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        epochs=tcfg["epochs"],
        batch_size=tcfg["batch_size"],
        lr=tcfg["lr"],
        lr_schedule=tuple((int(e), float(m)) for e, m in tcfg["lr_schedule"]),
        momentum=tcfg["momentum"],
        weight_decay=tcfg["weight_decay"],
        seed=tcfg["seed"],
        margin=MarginConfig(scale=tcfg["scale"], m1=tcfg["m1"],
                            m2=tcfg["m2"], m3=tcfg["m3"]),
        evolution=EvolutionConfig(
            lambda1=tcfg["lambda1"], lambda2=tcfg["lambda2"],
            lambda3=tcfg["lambda3"], lambda4=tcfg["lambda4"],
            m_init=tcfg["m_init"], epsilon_start=tcfg["epsilon_start"],
            total_epochs=tcfg["epochs"], min_support=tcfg["min_support"]),
        encoder_mode=tcfg["encoder_mode"],
        embed_dim=tcfg["embed_dim"],
        mask_enabled=tcfg["mask_enabled"],
        evolution_enabled=tcfg["evolution_enabled"],
        holdout_fraction=tcfg["holdout_fraction"],
    )


def write_metrics_csv(metrics: list, path: str) -> None:
    fields = ["epoch", "loss", "lr", "n_trained", "n_dropped",
              "n_active_centers", "n_classes", "produced", "dropped_centers",
              "merged"]
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for m in metrics:
            writer.writerow([repr(m[k]) if isinstance(m[k], float) else m[k]
                             for k in fields])
    os.replace(tmp, path)


def write_events(events: list, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for e in events:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    cfg = resolve_config(load_config(args.config), args)
    outdir = args.out
    echo_config(cfg, outdir)
    dcfg = cfg["dataset"]
    specs = build_specs(dcfg)
    try:
        ds = synth.generate_dataset(specs, dcfg["dim"], dcfg["concentration"],
                                    dcfg["seed"])
    except synth.SpecError as e:
        raise InputError(str(e)) from e
    ds.save(os.path.join(outdir, "dataset.json"))
    audit = synth.audit_dataset(ds)
    _atomic_json({"noise_ratio": ds.noise_ratio, "n_samples": len(ds),
                  "per_class": {str(k): v for k, v in audit.items()}},
                 os.path.join(outdir, "audit.json"))
    log.info("wrote dataset with %d samples, noise ratio %.4f", len(ds), ds.noise_ratio)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(load_config(args.config), args)
    outdir = args.out
    echo_config(cfg, outdir)
    ds_path = cfg["dataset_path"]
    if not os.path.isabs(ds_path):
        ds_path = os.path.join(os.path.dirname(os.path.abspath(args.config)), ds_path)
    if not os.path.exists(ds_path):
        raise InputError(f"dataset file not found: {ds_path}")
    ds = synth.Dataset.load(ds_path)
    tcfg = train_config(cfg["train"])
    try:
        state = trainer.train(ds, tcfg)
    except trainer.DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    trainer.save_checkpoint(state, tcfg, os.path.join(outdir, "checkpoint.json"))
    write_events(state.events, os.path.join(outdir, "events.jsonl"))
    write_metrics_csv(state.metrics, os.path.join(outdir, "metrics.csv"))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(load_config(args.config), args)
    outdir = args.out
    echo_config(cfg, outdir)
    base = os.path.dirname(os.path.abspath(args.config))
    ds_path = cfg["dataset_path"]
    ck_path = cfg["checkpoint_path"]
    if not os.path.isabs(ds_path):
        ds_path = os.path.join(base, ds_path)
    if not os.path.isabs(ck_path):
        ck_path = os.path.join(base, ck_path)
    for p in (ds_path, ck_path):
        if not os.path.exists(p):
            raise InputError(f"input file not found: {p}")
    ds = synth.Dataset.load(ds_path)
    state = trainer.load_checkpoint(ck_path)
    tcfg = train_config(cfg["train"])
    report = evaluation.evaluate_run(ds, state, tcfg,
                                     far_grid=tuple(cfg["eval"]["far_grid"]))
    report.to_json(os.path.join(outdir, "report.json"))
    report.to_csv(os.path.join(outdir, "report.csv"))
    return EXIT_OK


def _sweep_job(job):
    """One (ratio, method) training + evaluation; runs in a worker process."""
    cfg, ratio, method = job
    dcfg = dict(cfg["dataset"], preset="mixture", noise_ratio=ratio)
    specs = build_specs(dcfg)
    ds = synth.generate_dataset(specs, dcfg["dim"], dcfg["concentration"],
                                dcfg["seed"])
    tcfg = train_config(cfg["train"])
    if method == "baseline":
        tcfg = trainer.TrainConfig.baseline(
            epochs=tcfg.epochs, batch_size=tcfg.batch_size, lr=tcfg.lr,
            lr_schedule=tcfg.lr_schedule, momentum=tcfg.momentum,
            weight_decay=tcfg.weight_decay, seed=tcfg.seed, margin=tcfg.margin,
            evolution=tcfg.evolution, encoder_mode=tcfg.encoder_mode,
            embed_dim=tcfg.embed_dim, holdout_fraction=tcfg.holdout_fraction)
    state = trainer.train(ds, tcfg)
    report = evaluation.evaluate_run(ds, state, tcfg,
                                     far_grid=tuple(cfg["eval"]["far_grid"]))
    rows = []
    for far, tar in report.verification.get("tar", {}).items():
        rows.append((ratio, method, f"tar@{far:g}",
                     "" if tar is None else repr(float(tar))))
    rows.append((ratio, method, "measured_noise_ratio", repr(float(ds.noise_ratio))))
    rows.append((ratio, method, "drop_recall",
                 repr(float(report.cleaning["drop_recall"]))))
    rows.append((ratio, method, "merge_recall",
                 repr(float(report.cleaning["merge_recall"]))))
    return rows


def cmd_sweep(args) -> int:
    cfg = resolve_config(load_config(args.config), args)
    outdir = args.out
    try:
        ratios = [float(r) for r in args.noise_ratios.split(",") if r.strip() != ""]
    except ValueError as e:
        raise InputError(f"bad --noise-ratios value: {e}") from e
    if not ratios:
        raise InputError("--noise-ratios must list at least one ratio")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise InputError("noise ratios must lie in [0, 1]")
    cfg["sweep"] = {"noise_ratios": ratios, "parallel": args.parallel}
    echo_config(cfg, outdir)

    jobs = [(cfg, r, method) for r in ratios for method in ("esl", "baseline")]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    path = os.path.join(outdir, "sweep.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["noise_ratio", "method", "metric", "value"])
        for rows in results:
            for row in rows:
                writer.writerow(row)
    os.replace(tmp, path)
    if args.svg:
        _write_sweep_svg(results, os.path.join(outdir, "sweep.svg"))
    return EXIT_OK


def _write_sweep_svg(results, path: str) -> None:
    """Minimal line chart of tar@0.01 vs noise ratio, one line per method."""
    series: dict[str, list] = {}
    for rows in results:
        for ratio, method, metric, value in rows:
            if metric == "tar@0.01" and value != "":
                series.setdefault(method, []).append((ratio, float(value)))
    w, h, pad = 480, 320, 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    colors = {"esl": "#1f77b4", "baseline": "#d62728"}
    xs = sorted({r for pts in series.values() for r, _ in pts})
    if xs:
        xspan = max(xs[-1] - xs[0], 1e-9)
        for method, pts in series.items():
            pts = sorted(pts)
            coords = " ".join(
                f"{pad + (r - xs[0]) / xspan * (w - 2 * pad):.1f},"
                f"{h - pad - v * (h - 2 * pad):.1f}" for r, v in pts)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{colors.get(method, "black")}" stroke-width="2"/>')
    parts.append(f'<text x="{pad}" y="20">TAR@FAR=1e-2 vs noise ratio '
                 f'(blue: esl, red: baseline)</text></svg>')
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(parts))
    os.replace(tmp, path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esl",
                                description="Evolving sub-centers learning engine")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override dataset and training seeds")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train on an existing dataset file")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="ESL vs baseline across noise ratios")
    common(sp)
    sp.add_argument("--noise-ratios", required=True,
                    help="comma-separated ratios in [0,1]")
    sp.add_argument("--parallel", type=int, default=1)
    sp.add_argument("--svg", action="store_true", help="also write sweep.svg")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
