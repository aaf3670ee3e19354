"""Per-trial train/evaluate drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .dataio import DatasetSplit, IdentityRecord, by_identity, make_split
from .evaluation import CmcCurve, ConvergenceHistory, ConvergenceTracker, cmc, extract_descriptors
from .model import Model
from .trainer import TrainConfig, TrainResult, total_iterations, train


def trial_seed(seed: int, trial: int) -> int:
    return seed ^ trial


@dataclass
class TrialRun:
    split: DatasetSplit
    result: TrainResult
    history: ConvergenceHistory | None


def subset(records: Sequence[IdentityRecord], ids) -> list[IdentityRecord]:
    m = by_identity(records)
    return [m[i] for i in ids]


def train_trial(records: Sequence[IdentityRecord], trial: int, split_seed: int, config: TrainConfig,
                eval_every: int = 0, log_stream=None) -> TrialRun:
    """Train on the trial's training half; optionally track test CMC during training."""
    split = make_split(records, trial, split_seed)
    cfg = replace(config, seed=trial_seed(config.seed, trial))
    train_set = subset(records, split.train)
    tracker = None
    if eval_every:
        tracker = ConvergenceTracker(subset(records, split.test), total_iterations(cfg, len(train_set)))
    res = train(train_set, cfg, hook=tracker, hook_every=eval_every, log_stream=log_stream)
    return TrialRun(split, res, tracker.history if tracker else None)


def evaluate_split(records: Sequence[IdentityRecord], split: DatasetSplit, model: Model,
                   arch: str | None = None) -> CmcCurve:
    probes, gallery = extract_descriptors(subset(records, split.test), model, arch)
    return cmc(probes, gallery)
