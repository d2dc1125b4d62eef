"""Experiment grids that reuse work across cells.

Pretraining depends only on the data, seed and network settings, so loss-mode
ablations and alpha/beta grids share one pretraining per (rate, seed); an
imputation-rank sweep shares the whole training run.
"""

from __future__ import annotations

import time
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import MaskSpec, MultiViewDataset, generate_mask
from .exceptions import InvalidArgumentError
from .pipeline import TrainConfig, align_train, finish_run, pretrain, run

SENSITIVITY_GRID = (1e-3, 1e-2, 1e-1, 1e1, 1e2, 1e3)
ABLATION_MODES = ("rec-only", "rec+ia", "rec+pa", "cpspan")


def masked_dataset(base: MultiViewDataset, rate: Optional[float], seed: int) -> MultiViewDataset:
    """``base`` with a fresh uniform-cell mask, or unchanged when ``rate`` is None."""
    if rate is None:
        return base
    if not np.all(base.mask == 1):
        raise InvalidArgumentError("missing-rate grids need a complete base dataset")
    return base.with_mask(generate_mask(base.n_samples, base.n_views, MaskSpec(rate, seed)))


def run_variants(ds: MultiViewDataset, config: TrainConfig,
                 variants: Sequence[dict]) -> list:
    """One report per config variant, all sharing ``config``'s pretraining.

    Variants may only change fields that do not affect pretraining.
    """
    shared = pretrain(ds, config)
    reports = []
    for changes in variants:
        allowed = {"loss_mode", "alpha", "beta", "tau", "rank", "lr_align", "align_epochs",
                   "projection_cycles", "projection_tol", "final_restarts"}
        bad = set(changes) - allowed
        if bad:
            raise InvalidArgumentError(f"variant changes pretraining settings: {sorted(bad)}")
        reports.append(run(ds, config.replace(**changes), pretrained=shared))
    return reports


def rank_sweep(ds: MultiViewDataset, config: TrainConfig, ranks: Iterable[int]) -> list:
    """Train once, then impute/cluster once per neighbour rank."""
    started = time.perf_counter()
    aes, pre_curve = pretrain(ds, config)
    aes, states, align_curve = align_train(ds, aes, config)
    reports = []
    for r in ranks:
        cfg = config.replace(rank=int(r))
        reports.append(finish_run(ds, cfg, aes, pre_curve + align_curve, states,
                                  {"train": time.perf_counter() - started}, started))
    return reports


def mean_acc(reports) -> float:
    return float(np.mean([r.metrics["acc"] for r in reports]))
