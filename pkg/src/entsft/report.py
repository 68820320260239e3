"""Run reports: aligned tabular series per run plus rendered figures.

`export` reads each run directory's metrics.jsonl / evals.jsonl, writes one
tab-separated series file per run (step, eval_entropy, greedy_accuracy,
ngram_diversity) for side-by-side comparison, and renders PNG figures of
the same series next to the tables. Figure rendering can be switched off.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

SERIES_COLUMNS = ("step", "eval_entropy", "greedy_accuracy", "ngram_diversity")


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    evals_path = run_dir / "evals.jsonl"
    if not metrics_path.exists() or not evals_path.exists():
        raise FileNotFoundError(f"{run_dir} does not look like a run directory "
                                "(missing metrics.jsonl or evals.jsonl)")
    lines = metrics_path.read_text().splitlines()
    header = json.loads(lines[0]) if lines else {}
    metrics = [json.loads(line) for line in lines[1:] if line.strip()]
    evals = [json.loads(line) for line in evals_path.read_text().splitlines() if line.strip()]
    return {
        "name": run_dir.name,
        "config": header.get("config", {}),
        "metrics": metrics,
        "evals": evals,
    }


def _series_rows(run: dict) -> list[dict]:
    rows = []
    for rec in run["evals"]:
        rows.append({
            "step": rec["step"],
            "eval_entropy": rec.get("eval_entropy", ""),
            "greedy_accuracy": rec.get("greedy_accuracy", ""),
            "ngram_diversity": rec.get("ngram_diversity", ""),
        })
    return rows


def write_series(run: dict, out_dir: Path) -> Path:
    path = out_dir / f"{run['name']}_series.tsv"
    with open(path, "w") as fh:
        fh.write("\t".join(SERIES_COLUMNS) + "\n")
        for row in _series_rows(run):
            fh.write("\t".join(str(row[c]) for c in SERIES_COLUMNS) + "\n")
    return path


def _plot_metric(runs: list[dict], key: str, ylabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for run in runs:
        xs, ys = [], []
        for rec in run["evals"]:
            if rec.get(key, "") != "" and rec.get(key) is not None:
                xs.append(rec["step"])
                ys.append(rec[key])
        if xs:
            ax.plot(xs, ys, marker="o", markersize=3, label=run["name"])
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_train_loss(runs: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for run in runs:
        xs = [m["step"] for m in run["metrics"]]
        ys = [m["loss_total"] for m in run["metrics"]]
        if xs:
            ax.plot(xs, ys, label=run["name"], linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def export(run_dirs, out_dir, render: bool = True) -> dict:
    """Write per-run series tables (and figures) under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    series_paths = [str(write_series(run, out)) for run in runs]
    figures = []
    if render:
        for key, ylabel, fname in (
            ("eval_entropy", "mean token entropy (nats)", "entropy_vs_step.png"),
            ("greedy_accuracy", "greedy accuracy", "accuracy_vs_step.png"),
            ("ngram_diversity", "n-gram diversity", "diversity_vs_step.png"),
        ):
            path = out / fname
            _plot_metric(runs, key, ylabel, path)
            figures.append(str(path))
        loss_path = out / "train_loss_vs_step.png"
        _plot_train_loss(runs, loss_path)
        figures.append(str(loss_path))
    return {"series": series_paths, "figures": figures}
