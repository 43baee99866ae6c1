"""Plots and tables for ablation results and GAN convergence."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import SynthPipeError  # noqa: E402
from .experiments import SCENARIOS, EvaluationReport  # noqa: E402
from .gan_metrics import ConvergenceSeries  # noqa: E402

SCENARIO_COLORS = {"d": "tab:blue", "e": "tab:green", "f": "tab:orange", "g": "tab:purple"}
SCENARIO_LABELS = {
    "d": "real only (d)",
    "e": "real + synthetic positives (e)",
    "f": "synthetic positives (f)",
    "g": "fully synthetic (g)",
}


def _save(fig, stem: Path) -> list[Path]:
    paths = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    for p in paths:
        fig.savefig(p, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return paths


def plot_auc_bars(report: EvaluationReport, stem: Path) -> tuple[list[Path], int]:
    """Grouped bars of mean holdout AUC per patient count, error bars = replicate std.

    Returns the written paths and the number of bars drawn.
    """
    aggs = report.aggregates
    counts = sorted({a.patient_count for a in aggs})
    scenarios = [s for s in SCENARIOS if any(a.scenario == s for a in aggs)]
    width = 0.8 / max(len(scenarios), 1)
    x = np.arange(len(counts))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(counts), 3.6))
    n_bars = 0
    for j, s in enumerate(scenarios):
        by_count = {a.patient_count: a for a in aggs if a.scenario == s}
        means = [by_count[c].mean_auc if c in by_count else np.nan for c in counts]
        stds = [by_count[c].std_auc if c in by_count else 0.0 for c in counts]
        bars = ax.bar(x + (j - (len(scenarios) - 1) / 2) * width, means, width, yerr=stds, capsize=3,
                      color=SCENARIO_COLORS[s], label=SCENARIO_LABELS[s])
        n_bars += sum(1 for m in means if not np.isnan(m))
        del bars
    lo = min(a.mean_auc - a.std_auc for a in aggs)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_xticks(x, [str(c) for c in counts])
    ax.set_xlabel("training patients")
    ax.set_ylabel("holdout AUC-ROC")
    ax.legend(fontsize=8, loc="lower right")
    return _save(fig, stem), n_bars


def plot_convergence(series: ConvergenceSeries, stem: Path, title: str = "") -> list[Path]:
    """Three panels: kMMD, 1-NN LOO accuracy, 1 - mean feature score."""
    epochs = series.column("epoch")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(epochs, series.column("kmmd"), marker=".")
    axes[0].set_title("kMMD")
    axes[1].plot(epochs, series.column("nn_acc"), marker=".")
    axes[1].axhline(0.5, color="grey", lw=0.8, ls="--")
    axes[1].set_title("1-NN LOO accuracy")
    score = series.column("one_minus_score")
    if any(v is not None for v in score):
        axes[2].plot(epochs, [np.nan if v is None else v for v in score], marker=".")
    else:
        axes[2].text(0.5, 0.5, "not tracked", ha="center", va="center", transform=axes[2].transAxes)
    axes[2].set_title("1 - mean feature score")
    for ax in axes:
        ax.set_xlabel("epoch")
    if title:
        fig.suptitle(title)
    return _save(fig, stem)


def write_epoch_table(report: EvaluationReport, out: Path) -> list[Path]:
    """Epochs as columns, accuracy and AUC as rows (CSV and Markdown)."""
    rows = sorted(report.epoch_sweep, key=lambda r: r.epoch)
    header = ["Epoch"] + [str(r.epoch) for r in rows]
    acc = ["Accuracy"] + [f"{r.accuracy:.3f}" for r in rows]
    auc = ["AUCROC"] + [f"{r.auc:.3f}" for r in rows]
    csv_path = out / "table_pure_synthetic.csv"
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([header, acc, auc])
    md_path = out / "table_pure_synthetic.md"
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in (acc, auc)]
    md_path.write_text("\n".join(lines) + "\n")
    return [csv_path, md_path]


def render_report(report: EvaluationReport, out_dir: str | Path) -> dict[str, list[Path]]:
    """Write results tables and figures; returns written paths by kind."""
    if not report.rows:
        raise ValueError("cannot render an empty report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthPipeError(f"cannot write report to {out}: {exc}") from exc

    written: dict[str, list[Path]] = {}
    report.to_csv(out / "results.csv")
    report.to_jsonl(out / "results.jsonl")
    agg_path = out / "aggregates.csv"
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "patient_count", "mean_auc", "std_auc", "n"])
        for a in report.aggregates:
            w.writerow([a.scenario, a.patient_count, repr(a.mean_auc), repr(a.std_auc), a.n])
    written["tables"] = [out / "results.csv", out / "results.jsonl", agg_path]

    written["auc_bars"], _ = plot_auc_bars(report, out / "auc_by_patient_count")
    written["convergence"] = []
    for name, series in sorted(report.convergence.items()):
        if len(series):
            written["convergence"] += plot_convergence(series, out / f"convergence_{name}", name)
    if report.epoch_sweep:
        written["epoch_table"] = write_epoch_table(report, out)
    return written
