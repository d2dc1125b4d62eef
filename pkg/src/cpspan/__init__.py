"""Incomplete multi-view clustering by cross-view partial sample and shifted
prototype alignment."""

from .data import (
    MaskSpec,
    MultiViewDataset,
    PairObservedIndex,
    generate_mask,
    load_csv,
    pair_observed,
    resample_complete,
    save_csv,
    synth_gaussian,
)
from .estimator import CPSPAN
from .metrics import accuracy, evaluate, fmeasure, nmi
from .pipeline import RunReport, TrainConfig, align_train, pretrain, run

__version__ = "0.1.0"

__all__ = [
    "CPSPAN",
    "MaskSpec",
    "MultiViewDataset",
    "PairObservedIndex",
    "RunReport",
    "TrainConfig",
    "accuracy",
    "align_train",
    "evaluate",
    "fmeasure",
    "generate_mask",
    "load_csv",
    "nmi",
    "pair_observed",
    "pretrain",
    "resample_complete",
    "run",
    "save_csv",
    "synth_gaussian",
]
