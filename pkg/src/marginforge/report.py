"""Run artifacts: delimited metrics plus rendered figures.

Every CSV is byte-reproducible for a fixed config and seed: floats are
written with repr (shortest round-trip form) and rows follow a fixed order.
Figures are rendered alongside with the Agg backend; they are a convenience
view of the same data and carry no extra state.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import RunReport, ExperimentConfig, config_to_dict
from .net import save_model

SPLIT_ORDER = ("train", "validation", "test")


def _fmt(x) -> str:
    return repr(float(x))


def write_metrics_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "split", "accuracy", "loss"])
        for step, split, acc, loss in report.metrics:
            w.writerow([step, split, _fmt(acc), _fmt(loss)])


def write_distances_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "layer", "mean_distance"])
        for step, layer, value in report.distances:
            w.writerow([step, layer, _fmt(value)])


def write_attacks_csv(attack_results, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["eps", "source", "target", "attack_kind", "accuracy"])
        for res in attack_results:
            for eps, acc in res.rows:
                w.writerow([_fmt(eps), res.source, res.target, res.kind, _fmt(acc)])


def plot_training_curves(report: RunReport, path) -> None:
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.2))
    for split in SPLIT_ORDER:
        series = report.metric_series(split, "accuracy")
        if series and not all(v != v for _, v in series):
            steps, vals = zip(*series)
            ax_acc.plot(steps, vals, marker=".", label=split)
        series = report.metric_series(split, "loss")
        if series and not all(v != v for _, v in series):
            steps, vals = zip(*series)
            ax_loss.plot(steps, vals, marker=".", label=split)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend(fontsize=8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distances(report: RunReport, path) -> None:
    layers = sorted({l for _, l, _ in report.distances})
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for l in layers:
        series = report.distance_series(l)
        steps, vals = zip(*series)
        ax.plot(steps, vals, marker=".", label=f"layer {l}")
    ax.set_xlabel("step")
    ax.set_ylabel("mean distance to boundary")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attacks(attack_results, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for res in attack_results:
        eps, acc = zip(*res.rows)
        ax.plot(eps, acc, marker="o",
                label=f"{res.source} -> {res.target} ({res.kind})")
    ax.set_xlabel("eps")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(report: RunReport, out_dir) -> list[str]:
    """Write metrics.csv, distances.csv, attacks.csv, config.json, the model
    checkpoint, run_info.json and the figures; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def dest(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    write_metrics_csv(report, dest("metrics.csv"))
    write_distances_csv(report, dest("distances.csv"))
    write_attacks_csv(report.attacks, dest("attacks.csv"))
    with open(dest("config.json"), "w") as f:
        json.dump(report.config, f, indent=2, sort_keys=True)
        f.write("\n")
    info = {
        "wall_clock_seconds": report.wall_clock,
        "best_step": report.best_step,
        "best_val_accuracy": report.best_val_accuracy,
        "test_accuracy": report.test_accuracy,
    }
    if report.model is not None:
        save_model(report.model, dest("model.ckpt"))
        info["checkpoint"] = "model.ckpt"
    with open(dest("run_info.json"), "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")

    if report.metrics:
        plot_training_curves(report, dest("training_curves.png"))
    if report.distances:
        plot_distances(report, dest("distances.png"))
    if report.attacks:
        plot_attacks(report.attacks, dest("attacks.png"))
    return written


def emit_sweep_summary(runs, out_dir, sweep_kind: str) -> list[str]:
    """Summary CSV + accuracy-vs-fraction figure for noise/data sweeps.

    `runs` is a list of (fraction, seed, RunReport); each run's own artifacts
    go to a per-run subdirectory.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for fraction, seed, rep in runs:
        sub = os.path.join(out_dir, f"run_f{fraction:g}_s{seed}")
        written.extend(emit_report(rep, sub))
    summary = os.path.join(out_dir, f"{sweep_kind}_summary.csv")
    with open(summary, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fraction", "seed", "test_accuracy", "best_step", "best_val_accuracy"])
        for fraction, seed, rep in runs:
            w.writerow([_fmt(fraction), seed, _fmt(rep.test_accuracy),
                        rep.best_step, _fmt(rep.best_val_accuracy)])
    written.append(summary)

    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    fractions = sorted({f for f, _, _ in runs})
    means = [float(sum(r.test_accuracy for f2, _, r in runs if f2 == f)
                   / sum(1 for f2, _, _ in runs if f2 == f)) for f in fractions]
    ax.plot(fractions, means, marker="o")
    for f, s, rep in runs:
        ax.plot([f], [rep.test_accuracy], marker=".", color="gray", alpha=0.6)
    ax.set_xlabel("label flip fraction" if sweep_kind == "noise" else "training fraction")
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    figure = os.path.join(out_dir, f"{sweep_kind}_summary.png")
    fig.savefig(figure, dpi=120)
    plt.close(fig)
    written.append(figure)
    return written


def emit_attack_results(results, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "attacks.csv")
    write_attacks_csv(results, csv_path)
    fig_path = os.path.join(out_dir, "attacks.png")
    plot_attacks(results, fig_path)
    return [csv_path, fig_path]
