"""Report merging and plot emission.

Every plot PNG is written together with a ``.src.json`` sidecar holding the
exact series plotted, so downstream checks can re-parse what a figure encodes
without decoding pixels.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError
from .evaluate import CSV_COLUMNS, TransferReport


def merge_reports(paths: Sequence[str | Path], force: bool = False) -> TransferReport:
    """Concatenate report rows; refuses mismatched config hashes unless forced."""
    if not paths:
        raise ConfigError("need at least one report to merge")
    reports = []
    for path in paths:
        path = Path(path)
        try:
            if path.suffix == ".json":
                reports.append((path, TransferReport.from_json(path)))
            else:
                reports.append((path, TransferReport.from_csv(path)))
        except (OSError, KeyError, ValueError, IndexError) as exc:
            raise ConfigError(f"cannot parse report {path}: {exc}") from exc
    hashes = {r.metadata.get("config_hash") for _, r in reports}
    if len(hashes) > 1 and not force:
        offending = {str(p): r.metadata.get("config_hash") for p, r in reports}
        raise ConfigError(f"config hashes differ across reports: {offending}")
    merged = TransferReport(metadata={
        "merged_from": [str(p) for p, _ in reports],
        "config_hash": hashes.pop() if len(hashes) == 1 else None,
    })
    for _, rep in reports:
        merged.rows.extend(rep.rows)
    return merged


def _atomic_save_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def plot_series(x: Sequence, series: dict[str, Sequence[float]], path: str | Path,
                xlabel: str, ylabel: str, title: str = "") -> Path:
    """Line plot of one or more series over a shared x axis, plus sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in series.items():
        ax.plot(list(x), list(values), marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    _atomic_save_json(path.with_suffix(".src.json"),
                      {"x": list(x), "series": {k: list(v) for k, v in series.items()},
                       "xlabel": xlabel, "ylabel": ylabel})
    return path


def plot_training_curves(log_snapshots: Sequence[dict], path: str | Path) -> Path:
    """Per-target transfer success over training iterations."""
    iterations = [s["iteration"] for s in log_snapshots]
    targets = sorted({t for s in log_snapshots for t in s["rates"]})
    series = {t: [s["rates"].get(t, float("nan")) for s in log_snapshots] for t in targets}
    return plot_series(iterations, series, path, xlabel="iteration",
                       ylabel="transfer success rate", title="transfer success during training")


def plot_sweep(report: TransferReport, axis: str, path: str | Path) -> Path:
    """Success-rate curves per target over the swept axis values."""
    column = {"T_v": "T_v", "epsilon": "epsilon", "T_t-checkpoints": "surrogate"}.get(axis)
    if column is None:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    xs = sorted({row[column] for row in report.rows})
    targets = sorted({row["target"] for row in report.rows})
    series = {}
    for target in targets:
        lookup = {row[column]: row["success_rate"] for row in report.rows if row["target"] == target}
        series[target] = [lookup.get(x, float("nan")) for x in xs]
    return plot_series(xs, series, path, xlabel=axis, ylabel="success rate",
                       title=f"sweep over {axis}")


def write_long_table(report: TransferReport, path: str | Path) -> None:
    """Merged rows in the fixed CSV schema."""
    report.to_csv(path)


def format_comparison(report: TransferReport) -> str:
    """Plain-text matrix of success rates, surrogates as rows, targets as columns."""
    surrogates = sorted({r["surrogate"] for r in report.rows})
    targets = sorted({r["target"] for r in report.rows})
    lookup = {(r["surrogate"], r["target"]): r["success_rate"] for r in report.rows}
    width = max([len(s) for s in surrogates + ["surrogate"]])
    lines = ["  ".join(["surrogate".ljust(width)] + [t.rjust(10) for t in targets])]
    for s in surrogates:
        cells = [f"{lookup[(s, t)]:.4f}".rjust(10) if (s, t) in lookup else " " * 10
                 for t in targets]
        lines.append("  ".join([s.ljust(width)] + cells))
    return "\n".join(lines)
