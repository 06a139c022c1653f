"""Forecast evaluation: Nash-Sutcliffe efficiency, categories, and reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricsError(Exception):
    pass


class UndefinedVarianceError(MetricsError):
    """Observations are constant; the NSE denominator is zero."""


def nse(pred, obs):
    """1 - SSE / variance-sum of the observations."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise MetricsError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    if obs.size < 2:
        raise MetricsError("need at least 2 observations")
    denom = np.sum((obs - obs.mean()) ** 2)
    if denom == 0.0:
        raise UndefinedVarianceError("constant observations: NSE denominator is zero")
    return 1.0 - float(np.sum((pred - obs) ** 2) / denom)


CATEGORIES = ["Very good", "Good", "Satisfactory", "Acceptable", "Unsatisfactory"]


def categorize(value):
    """Performance band for an NSE value (strict upper bounds except the top)."""
    if not np.isfinite(value):
        raise MetricsError(f"NSE value must be finite, got {value}")
    if value > 0.75:
        return "Very good"
    if value > 0.65:
        return "Good"
    if value > 0.5:
        return "Satisfactory"
    if value > 0.4:
        return "Acceptable"
    return "Unsatisfactory"


def mse(pred, obs):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    return float(np.mean((pred - obs) ** 2))


@dataclass
class EvalReport:
    """Per-reservoir, per-lead-day NSE plus the aggregates built from it."""

    node_ids: list
    horizon: int
    nse_matrix: np.ndarray  # (N, H)
    mse_value: float
    seed: int = 0
    config_hash: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def per_day_nse(self):
        return self.nse_matrix.mean(axis=0)

    @property
    def overall_nse(self):
        return float(self.nse_matrix.mean())

    def category_counts(self):
        """Per lead day: how many reservoirs fall into each band."""
        counts = []
        for k in range(self.horizon):
            row = {c: 0 for c in CATEGORIES}
            for i in range(len(self.node_ids)):
                row[categorize(self.nse_matrix[i, k])] += 1
            counts.append(row)
        return counts


def evaluate_forecasts(pred, obs, node_ids):
    """Pool test windows per (reservoir, lead day) and score each series.

    ``pred`` and ``obs`` have shape (windows, N, H) in physical units.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise MetricsError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    n_windows, n_nodes, horizon = pred.shape
    if n_nodes != len(node_ids):
        raise MetricsError("node id count does not match forecast array")
    matrix = np.zeros((n_nodes, horizon))
    for i in range(n_nodes):
        for k in range(horizon):
            matrix[i, k] = nse(pred[:, i, k], obs[:, i, k])
    return EvalReport(
        node_ids=list(node_ids),
        horizon=horizon,
        nse_matrix=matrix,
        mse_value=mse(pred, obs),
    )


def emit_report(report: EvalReport, out_dir, edge_rows=None, plots=True):
    """Write report.json, nse_by_day.csv, categories.csv, edges_final.csv, plots."""
    if not report.node_ids:
        raise MetricsError("empty reservoir set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    payload = {
        "overall_nse": report.overall_nse,
        "per_day_nse": [float(v) for v in report.per_day_nse],
        "mse": report.mse_value,
        "seed": report.seed,
        "config_hash": report.config_hash,
        "reservoirs": report.node_ids,
    }
    payload.update(report.extras)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(out_dir / "nse_by_day.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["reservoir", "lead_day", "nse"])
        for i, rid in enumerate(report.node_ids):
            for k in range(report.horizon):
                writer.writerow([rid, k + 1, f"{report.nse_matrix[i, k]:.6f}"])

    counts = report.category_counts()
    with open(out_dir / "categories.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lead_day", *CATEGORIES])
        for k, row in enumerate(counts):
            writer.writerow([k + 1, *[row[c] for c in CATEGORIES]])

    with open(out_dir / "edges_final.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst", "active"])
        for row in edge_rows or []:
            writer.writerow(row)

    if plots:
        _emit_plots(report, counts, edge_rows or [], out_dir)
    return out_dir


def _emit_plots(report, counts, edge_rows, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    days = np.arange(1, report.horizon + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(days, report.per_day_nse, color="steelblue")
    ax.set_xlabel("lead day")
    ax.set_ylabel("mean NSE")
    ax.set_title("Per-day forecast skill")
    fig.tight_layout()
    fig.savefig(out_dir / "nse_by_day.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    bottom = np.zeros(report.horizon)
    for cat in CATEGORIES:
        vals = np.array([row[cat] for row in counts], dtype=float)
        ax.bar(days, vals, bottom=bottom, label=cat)
        bottom += vals
    ax.set_xlabel("lead day")
    ax.set_ylabel("reservoirs")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "categories.png", dpi=120)
    plt.close(fig)

    if edge_rows:
        nodes = sorted({r[0] for r in edge_rows} | {r[1] for r in edge_rows})
        pos = {rid: (np.cos(2 * np.pi * i / len(nodes)), np.sin(2 * np.pi * i / len(nodes))) for i, rid in enumerate(nodes)}
        fig, ax = plt.subplots(figsize=(5, 5))
        for src, dst, active in edge_rows:
            if src == dst:
                continue
            x0, y0 = pos[src]
            x1, y1 = pos[dst]
            style = dict(color="tab:blue", lw=1.5) if int(active) else dict(color="lightgray", lw=0.8, ls="--")
            ax.annotate(
                "",
                xy=(x1, y1),
                xytext=(x0, y0),
                arrowprops=dict(arrowstyle="->", **style),
            )
        for rid, (x, y) in pos.items():
            ax.plot(x, y, "o", color="tab:orange")
            ax.text(x * 1.12, y * 1.12, rid, ha="center", va="center", fontsize=8)
        ax.set_axis_off()
        fig.savefig(out_dir / "graph.png", dpi=120)
        plt.close(fig)
