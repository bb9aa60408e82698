"""Matplotlib renderings of the CSV/JSON reports, written next to them."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import CompareReport, ShiftReport

_PNG_META = {"Software": "blockgrow"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return path


def training_loss_figure(losses: list[float], path: str | Path,
                         title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(len(losses)), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def compare_loss_figure(report: CompareReport, path: str | Path) -> Path:
    """One loss curve per run, colored by strategy."""
    labels = sorted({key.split("/", 1)[0] for key in report.loss_histories})
    cmap = plt.get_cmap("tab10")
    colors = {label: cmap(i % 10) for i, label in enumerate(labels)}
    fig, ax = plt.subplots(figsize=(8, 4.5))
    seen = set()
    for key in sorted(report.loss_histories):
        losses = report.loss_histories[key]
        if not losses:
            continue
        label = key.split("/", 1)[0]
        ax.plot(range(len(losses)), losses, lw=0.7, alpha=0.8,
                color=colors[label],
                label=label if label not in seen else None)
        seen.add(label)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy loss")
    ax.set_title("domain adaptation loss by strategy")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def compare_perplexity_figure(report: CompareReport, path: str | Path) -> Path:
    """Median domain/general perplexity per strategy against the base lines."""
    labels = sorted(report.medians)
    domain = [report.medians[l]["domain_ppl"] for l in labels]
    general = [report.medians[l]["general_ppl"] for l in labels]
    xs = range(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar([x - width / 2 for x in xs], domain, width, label="domain ppl")
    ax.bar([x + width / 2 for x in xs], general, width, label="general ppl")
    ax.axhline(report.base_domain_ppl, color="tab:blue", ls="--", lw=1,
               label="base domain")
    ax.axhline(report.base_general_ppl, color="tab:orange", ls="--", lw=1,
               label="base general")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("perplexity (median over seeds)")
    ax.set_title("domain vs general perplexity by strategy")
    finite = [v for v in domain + general if math.isfinite(v)]
    if finite:
        ax.set_ylim(0, 1.15 * max(finite + [report.base_domain_ppl,
                                            report.base_general_ppl]))
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)


def shift_fractions_figure(report: ShiftReport, path: str | Path) -> Path:
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.8),
                                  gridspec_kw={"width_ratios": [1, 2]})
    names = ["unshifted\n(rank 1)", "marginal\n(rank 2-3)", "shifted\n(rank >3)"]
    ax.bar(names, report.fractions, color=["tab:green", "tab:olive", "tab:red"])
    ax.set_ylim(0, 1)
    ax.set_ylabel("fraction of positions")
    ax.set_title("base-rank buckets")
    flat = [eta for etas in report.per_query_etas for eta in etas]
    top = max(flat) if flat else 1
    bins = range(1, min(top, 20) + 2)
    ax2.hist(flat, bins=bins, align="left", rwidth=0.85, color="tab:blue")
    ax2.set_xlabel("base rank of chosen token")
    ax2.set_ylabel("positions")
    ax2.set_title("rank histogram (clipped at 20)")
    for a in (ax, ax2):
        a.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
