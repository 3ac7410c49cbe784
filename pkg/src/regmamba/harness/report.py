"""Metrics files and plots.

Files written by :func:`write_report` into the output directory:

``metrics.json``
    ``{"format_version": 1, "reports": {<name>: {"n_pairs", "mean_l2", "wall_time_ms",
    "cmr": {"<T>": rate}, "per_pair": [{"pair_id", "gt", "predicted", "score", "l2_error"}]}}}``.
    Keys are sorted, floats are rounded to 10 significant digits, thresholds are
    formatted with ``%g``.
``metrics.md``
    Summary table (one column per report) followed by a per-pair L2 table over the
    sorted union of pair ids; a pair missing from a report shows ``n/a``.
``cmr_curve.png``
    CMR against threshold for each report.

Optional: ``loss_curve.png`` (per-step training loss), ``robustness.csv`` and
``robustness.png`` (CMR/L2 against noise variance).
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import AblationResult, EvalReport, RobustnessRow  # noqa: E402

METRICS_VERSION = 1


def _r(x: float | None) -> float | None:
    return None if x is None else float(f"{float(x):.10g}")


def report_to_dict(rep: EvalReport) -> dict:
    per_pair = [{"pair_id": pid, "gt": list(gt), "predicted": list(r.predicted), "score": _r(r.score),
                 "l2_error": _r(r.l2_error)}
                for pid, gt, r in zip(rep.pair_ids, rep.gt, rep.per_pair)]
    return {
        "n_pairs": len(rep.per_pair),
        "mean_l2": _r(rep.mean_l2),
        "wall_time_ms": _r(rep.wall_time_ms),
        "cmr": {f"{t:g}": _r(v) for t, v in sorted(rep.cmr.items())},
        "per_pair": sorted(per_pair, key=lambda d: d["pair_id"]),
    }


def metrics_json(reports: Mapping[str, EvalReport]) -> str:
    doc = {"format_version": METRICS_VERSION, "reports": {k: report_to_dict(v) for k, v in reports.items()}}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def metrics_markdown(reports: Mapping[str, EvalReport]) -> str:
    names = list(reports)
    thresholds = sorted(set().union(*(r.cmr for r in reports.values())))
    rows = [["pairs"] + [str(len(reports[n].per_pair)) for n in names],
            ["mean L2"] + [f"{reports[n].mean_l2:.3f}" for n in names]]
    for t in thresholds:
        rows.append([f"CMR({t:g})"] + [f"{reports[n].cmr[t]:.3f}" if t in reports[n].cmr else "n/a" for n in names])
    rows.append(["time/pair ms"] + [f"{reports[n].wall_time_ms:.1f}" for n in names])
    out = "# Matching metrics\n\n" + _table(["metric"] + names, rows)

    by_id = {n: dict(zip(r.pair_ids, r.per_pair)) for n, r in reports.items()}
    universe = sorted(set().union(*(d.keys() for d in by_id.values())))
    pair_rows = [[pid] + [f"{by_id[n][pid].l2_error:.3f}" if pid in by_id[n] else "n/a" for n in names]
                 for pid in universe]
    out += "\n## Per-pair L2 error\n\n" + _table(["pair_id"] + names, pair_rows)
    return out


def plot_cmr(reports: Mapping[str, EvalReport], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rep in reports.items():
        ts = sorted(rep.cmr)
        ax.plot(ts, [rep.cmr[t] for t in ts], marker="o", label=name)
    ax.set_xlabel("threshold T (px)")
    ax.set_ylabel("CMR(T)")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss(step_losses: Sequence[float], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    y = np.asarray(step_losses, dtype=np.float64)
    ax.plot(np.arange(1, len(y) + 1), y, lw=0.6, alpha=0.5, label="step")
    w = min(25, len(y))
    if w > 1:
        ax.plot(np.arange(w, len(y) + 1), np.convolve(y, np.ones(w) / w, mode="valid"), label=f"mean of {w}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_robustness(rows: Sequence[RobustnessRow], out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "robustness.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variance_pct", "cmr1", "cmr3", "mean_l2"])
        for r in rows:
            w.writerow([f"{r.variance:g}", f"{r.cmr1:.4f}", f"{r.cmr3:.4f}", f"{r.mean_l2:.4f}"])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    v = [r.variance for r in rows]
    a1.plot(v, [r.cmr1 for r in rows], marker="o", label="CMR(1)")
    a1.plot(v, [r.cmr3 for r in rows], marker="s", label="CMR(3)")
    a1.set_xlabel("noise variance (%)")
    a1.set_ylim(0, 1.02)
    a1.legend(fontsize=7)
    a2.plot(v, [r.mean_l2 for r in rows], marker="o", color="C3")
    a2.set_xlabel("noise variance (%)")
    a2.set_ylabel("mean L2 (px)")
    for a in (a1, a2):
        a.grid(alpha=0.3)
    fig.tight_layout()
    plot = out_dir / "robustness.png"
    fig.savefig(plot, dpi=100)
    plt.close(fig)
    return table, plot


def ablation_markdown(results: Sequence[AblationResult]) -> str:
    thresholds = sorted(set().union(*(r.report.cmr for r in results))) if results else []
    header = ["cell", "MEFL", "MFA", "experts", "fusion", "mean L2"] + [f"CMR({t:g})" for t in thresholds] \
        + ["final loss", "train s"]
    rows = []
    for r in results:
        c = r.cell
        rows.append([c.name, "on" if c.use_mefl else "off", "on" if c.use_mfa else "off", str(c.n_experts),
                     c.fusion if c.use_mefl and c.n_experts > 1 else "-", f"{r.report.mean_l2:.3f}"]
                    + [f"{r.report.cmr[t]:.3f}" for t in thresholds]
                    + [f"{r.final_loss:.4f}", f"{r.train_seconds:.0f}"])
    return "# Ablation grid\n\n" + _table(header, rows)


def write_ablation(results: Sequence[AblationResult], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.md"
    path.write_text(ablation_markdown(results))
    doc = {"format_version": METRICS_VERSION,
           "cells": [{"name": r.cell.name, "use_mefl": r.cell.use_mefl, "use_mfa": r.cell.use_mfa,
                      "n_experts": r.cell.n_experts, "fusion": r.cell.fusion, "final_loss": _r(r.final_loss),
                      "train_seconds": _r(r.train_seconds), "mean_l2": _r(r.report.mean_l2),
                      "cmr": {f"{t:g}": _r(v) for t, v in sorted(r.report.cmr.items())}} for r in results]}
    (out_dir / "ablation.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


def write_report(reports: Mapping[str, EvalReport], out_dir: str | Path,
                 step_losses: Sequence[float] | None = None,
                 robustness: Sequence[RobustnessRow] | None = None) -> list[Path]:
    if not reports:
        raise ValueError("need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "metrics.json", out_dir / "metrics.md", out_dir / "cmr_curve.png"]
    written[0].write_text(metrics_json(reports))
    written[1].write_text(metrics_markdown(reports))
    plot_cmr(reports, written[2])
    if step_losses is not None and len(step_losses):
        written.append(out_dir / "loss_curve.png")
        plot_loss(step_losses, written[-1])
    if robustness is not None:
        written.extend(write_robustness(robustness, out_dir))
    return written


def load_metrics(path: str | Path) -> dict[str, EvalReport]:
    """Rebuild reports from a ``metrics.json`` file."""
    from ..matcher import MatchResult

    doc = json.loads(Path(path).read_text())
    out = {}
    for name, d in doc["reports"].items():
        pp = d["per_pair"]
        out[name] = EvalReport(d["mean_l2"], {float(k): v for k, v in d["cmr"].items()},
                               [MatchResult(tuple(p["predicted"]), p["score"], p["l2_error"]) for p in pp],
                               [p["pair_id"] for p in pp], [tuple(p["gt"]) for p in pp], d["wall_time_ms"])
    return out
