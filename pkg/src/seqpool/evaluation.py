"""Retrieval evaluation: descriptors, CMC curves, trial statistics, convergence."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .dataio import IdentityRecord
from .errors import DimensionError, DomainError
from .model import Model

CMC_HEADER = ("rank", "mean", "ci_half")
DIFF_HEADER = ("rank", "mean_diff", "ci_half")
HISTORY_HEADER = ("progress", "rank", "value")


@dataclass
class CmcCurve:
    values: np.ndarray          # values[k-1] = CMC(k)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def at(self, rank: int) -> float:
        return float(self.values[min(rank, len(self.values)) - 1])

    def __len__(self):
        return len(self.values)


@dataclass
class TrialAggregate:
    curves: np.ndarray          # (n_trials, G)
    mean: np.ndarray
    ci_half: np.ndarray | None  # None for a single trial


@dataclass
class ConvergenceHistory:
    progress: list[float] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    curves: list[CmcCurve] = field(default_factory=list)

    def add(self, progress: float, iteration: int, curve: CmcCurve) -> None:
        if self.progress and progress <= self.progress[-1]:
            raise DomainError("convergence checkpoints must have strictly increasing progress")
        self.progress.append(progress)
        self.iterations.append(iteration)
        self.curves.append(curve)

    def series(self, rank: int) -> np.ndarray:
        return np.array([c.at(rank) for c in self.curves])


def extract_descriptors(identities: Sequence[IdentityRecord], model: Model,
                        arch: str | None = None, probe_camera: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One descriptor per identity per camera: ``(probes, gallery)``, row i = identity i."""
    probe, gallery = [], []
    for rec in identities:
        for tr in rec.tracks:
            if len(tr) == 0:
                raise DomainError(f"identity {rec.identity} has an empty track")
        probe.append(model.descriptor(rec.tracks[probe_camera], arch))
        gallery.append(model.descriptor(rec.tracks[1 - probe_camera], arch))
    return np.array(probe), np.array(gallery)


def distance_matrix(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = probes[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def match_ranks(probes: np.ndarray, gallery: np.ndarray, truth: Sequence[int] | None = None) -> np.ndarray:
    """1-based rank of each probe's true gallery item; ties go to the lower gallery index."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if probes.shape[1] != gallery.shape[1]:
        raise DimensionError(f"probe dim {probes.shape[1]} vs gallery dim {gallery.shape[1]}")
    truth = np.arange(len(probes)) if truth is None else np.asarray(truth)
    D = distance_matrix(probes, gallery)
    rows = np.arange(len(probes))
    dt = D[rows, truth][:, None]
    idx = np.arange(gallery.shape[0])[None, :]
    better = (D < dt) | ((D == dt) & (idx < truth[:, None]))
    return 1 + better.sum(axis=1)


def cmc(probes: np.ndarray, gallery: np.ndarray, truth: Sequence[int] | None = None) -> CmcCurve:
    """CMC(k) = fraction of probes whose true match is within the top k gallery items."""
    G = np.atleast_2d(gallery).shape[0]
    ranks = match_ranks(probes, gallery, truth)
    counts = np.bincount(ranks, minlength=G + 1)[1:G + 1]
    return CmcCurve(np.cumsum(counts) / len(ranks))


def t_multiplier(n: int, level: float = 0.95) -> float:
    return float(stats.t.ppf(0.5 + level / 2, n - 1))


def aggregate_trials(curves: Sequence, allow_single: bool = False) -> TrialAggregate:
    """Per-rank mean and Student-t 95% half-width ``t * sd / sqrt(n)``."""
    mat = np.array([c.values if isinstance(c, CmcCurve) else np.asarray(c, float) for c in curves])
    if mat.ndim != 2 or len(mat) == 0:
        raise DomainError("need a non-empty list of equal-length curves")
    n = len(mat)
    mean = mat.mean(axis=0)
    if n < 2:
        if not allow_single:
            raise DomainError("a confidence interval needs at least 2 trials")
        return TrialAggregate(mat, mean, None)
    sd = mat.std(axis=0, ddof=1)
    return TrialAggregate(mat, mean, t_multiplier(n) * sd / np.sqrt(n))


def compare_architectures(curves_a: Sequence, curves_b: Sequence, allow_single: bool = False) -> TrialAggregate:
    """Paired per-trial differences A - B, aggregated per rank."""
    if len(curves_a) != len(curves_b):
        raise DomainError(f"paired comparison needs equal trial counts ({len(curves_a)} vs {len(curves_b)})")
    diffs = [np.asarray(getattr(a, "values", a), float) - np.asarray(getattr(b, "values", b), float)
             for a, b in zip(curves_a, curves_b)]
    return aggregate_trials(diffs, allow_single=allow_single)


def ci_contains_zero(agg: TrialAggregate) -> np.ndarray:
    return (agg.mean - agg.ci_half <= 0.0) & (0.0 <= agg.mean + agg.ci_half)


class ConvergenceTracker:
    """Training hook that evaluates CMC on a held-out set at each call.

    Evaluation runs with dropout off on a copy-free read of the parameters
    and draws no random numbers, so training is unaffected.
    """

    def __init__(self, test_records: Sequence[IdentityRecord], total_iterations: int,
                 arch: str | None = None):
        self.test = list(test_records)
        self.total = max(total_iterations, 1)
        self.arch = arch
        self.history = ConvergenceHistory()

    def __call__(self, iteration: int, model: Model) -> None:
        probes, gallery = extract_descriptors(self.test, model, self.arch)
        self.history.add(iteration / self.total, iteration, cmc(probes, gallery))


def first_reaching(history: ConvergenceHistory, rank: int = 1, fraction: float = 0.95) -> int:
    """First checkpoint iteration whose CMC(rank) reaches ``fraction`` of the final value."""
    s = history.series(rank)
    target = fraction * s[-1]
    for it, v in zip(history.iterations, s):
        if v >= target:
            return it
    return history.iterations[-1]


def average_history(histories: Sequence[ConvergenceHistory], rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean CMC(rank) across trials at shared checkpoints: ``(iterations, values)``."""
    its = histories[0].iterations
    for h in histories:
        if h.iterations != its:
            raise DomainError("histories do not share checkpoints")
    return np.array(its), np.mean([h.series(rank) for h in histories], axis=0)


# ---------------------------------------------------------------------------
# CSV output


def _g(x) -> str:
    return f"{x:.6g}"


def write_cmc_csv(path, agg: TrialAggregate) -> None:
    _write_rank_csv(path, CMC_HEADER, agg)


def write_diff_csv(path, agg: TrialAggregate) -> None:
    _write_rank_csv(path, DIFF_HEADER, agg)


def _write_rank_csv(path, header, agg: TrialAggregate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, m in enumerate(agg.mean, 1):
            ci = "" if agg.ci_half is None else _g(agg.ci_half[k - 1])
            w.writerow([k, _g(m), ci])


def write_history_csv(path, history: ConvergenceHistory, ranks: Sequence[int] = (1, 5, 10, 20)) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for p, c in zip(history.progress, history.curves):
            for r in ranks:
                if r <= len(c):
                    w.writerow([_g(p), r, _g(c.at(r))])


def read_rank_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]} if rows else {}
