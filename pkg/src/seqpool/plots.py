"""Figures written next to the CSV outputs."""
from __future__ import annotations

from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import TrialAggregate  # noqa: E402

_PNG_META = {"Software": None}


def _finish(fig, path) -> None:
    fig.tight_layout(pad=0.5)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_cmc(curves: Mapping[str, TrialAggregate], path, title: str = "CMC") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, agg in curves.items():
        ranks = np.arange(1, len(agg.mean) + 1)
        ax.plot(ranks, 100 * agg.mean, marker=".", label=label)
        if agg.ci_half is not None:
            lo = np.clip(agg.mean - agg.ci_half, 0, 1)
            hi = np.clip(agg.mean + agg.ci_half, 0, 1)
            ax.fill_between(ranks, 100 * lo, 100 * hi, alpha=0.25)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    _finish(fig, path)


def plot_diff(agg: TrialAggregate, path, label: str = "A - B") -> None:
    """Per-rank paired differences: trial scatter, mean and 95% interval."""
    fig, ax = plt.subplots(figsize=(5, 3))
    ranks = np.arange(1, len(agg.mean) + 1)
    for row in agg.curves:
        ax.plot(ranks, 100 * row, ".", color="0.6", ms=3)
    ax.plot(ranks, 100 * agg.mean, "k-", label=f"mean {label}")
    if agg.ci_half is not None:
        ax.fill_between(ranks, 100 * (agg.mean - agg.ci_half), 100 * (agg.mean + agg.ci_half),
                        color="C0", alpha=0.3, label="95% CI")
    ax.axhline(0.0, color="r", lw=0.8)
    ax.set_xlabel("rank")
    ax.set_ylabel("CMC difference (%)")
    ax.legend(loc="upper right", fontsize="small")
    _finish(fig, path)


def plot_history(series: Mapping[str, tuple[np.ndarray, np.ndarray]], path, rank: int = 1) -> None:
    """Mean CMC at one rank against training progress, one line per run."""
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, (progress, values) in series.items():
        ax.plot(100 * np.asarray(progress), 100 * np.asarray(values), label=label)
    ax.set_xlabel("training progress (%)")
    ax.set_ylabel(f"rank-{rank} (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    _finish(fig, path)
