"""Static figures rendered next to report files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import ATTACK_ORDER, ExperimentReport  # noqa: E402

_PNG_META = {"Software": None}


def plot_overhead_box(report: ExperimentReport, path, limit=None) -> Path:
    """Box plot of injected-API counts on evaded samples, one box per attack."""
    limits = sorted({r["overhead_limit"] for r in report.audits})
    if limit is None:
        limit = 0.2 if 0.2 in limits else limits[-1]
    attacks = [a for a in ATTACK_ORDER if any(r["attack"] == a for r in report.audits)]
    data = [[r["overhead"] for r in report.audits
             if r["attack"] == a and r["overhead_limit"] == limit and r["evaded"]] for a in attacks]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([d if d else [0] for d in data], showmeans=True)
    ax.set_xticks(range(1, len(attacks) + 1), [f"{a}\n(n={len(d)})" for a, d in zip(attacks, data)])
    ax.set_ylabel("injected API calls")
    ax.set_title(f"Overhead on evaded samples, limit {limit:.0%}")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_effectiveness(report: ExperimentReport, path) -> Path:
    """Problem-space effectiveness against overhead limit, one line per strategy."""
    cells = report.aggregates["by_cell"]
    thr = cells[0]["threshold"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in sorted({c["strategy"] for c in cells}):
        pts = sorted((c["overhead_limit"], c["effectiveness"]) for c in cells
                     if c["strategy"] == s and c["threshold"] == thr)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=s.upper())
    ax.set_xlabel("overhead limit")
    ax.set_ylabel("attack effectiveness")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{report.experiment}, threshold {thr:g}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_threshold_sweep(report: ExperimentReport, path) -> Path:
    """TPR, FPR and per-strategy effectiveness across target thresholds."""
    rows = report.aggregates["by_threshold"]
    ts = [r["threshold"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    if all(r["tpr"] is not None for r in rows):
        ax.plot(ts, [r["tpr"] for r in rows], "k--", label="TPR")
        ax.plot(ts, [r["fpr"] for r in rows], "k:", label="FPR")
    for key in rows[0]["effectiveness"]:
        ax.plot(ts, [r["effectiveness"][key] for r in rows], marker="o", label=key)
    ax.set_xlabel("target threshold")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def render_figures(report: ExperimentReport, outdir, stem: str) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if not report.audits:
        return []
    if report.experiment == "feature-space":
        return [plot_overhead_box(report, outdir / f"{stem}_overhead.png")]
    out = [plot_effectiveness(report, outdir / f"{stem}_effectiveness.png")]
    if len(report.aggregates["by_threshold"]) > 1:
        out.append(plot_threshold_sweep(report, outdir / f"{stem}_thresholds.png"))
    return out
