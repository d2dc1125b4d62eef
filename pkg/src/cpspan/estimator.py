"""scikit-learn compatible wrapper around the pipeline."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .data import MultiViewDataset
from .exceptions import InvalidArgumentError
from .metrics import accuracy
from .pipeline import TrainConfig, run


def check_multiview(X, mask=None):
    """Validate a list of view matrices and derive the observation mask.

    Rows that are entirely NaN in a view count as missing there when no
    ``mask`` is given.  Returns ``(views, mask)`` with NaNs replaced by 0.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise InvalidArgumentError("X must be a sequence of per-view matrices, not one matrix")
    views = [check_array(x, dtype=np.float64, ensure_all_finite="allow-nan") for x in X]
    if len(views) < 2:
        raise InvalidArgumentError("need at least two views")
    n = views[0].shape[0]
    if any(x.shape[0] != n for x in views):
        raise InvalidArgumentError("all views must have the same number of rows")
    if mask is None:
        mask = np.stack([~np.isnan(x).all(axis=1) for x in views], axis=1).astype(np.int8)
    else:
        mask = check_array(mask, dtype=None)
        if mask.shape != (n, len(views)):
            raise InvalidArgumentError(f"mask must have shape ({n}, {len(views)})")
    for v, x in enumerate(views):
        seen = mask[:, v] == 1
        if np.isnan(x[seen]).any():
            raise InvalidArgumentError(f"view {v} has NaN entries in observed rows")
        views[v] = np.where(np.isnan(x), 0.0, x)
    return views, mask


class CPSPAN(ClusterMixin, BaseEstimator):
    """Incomplete multi-view clustering estimator.

    Parameters mirror :class:`~cpspan.pipeline.TrainConfig`.  ``fit`` takes a
    list of per-view arrays; missing views are given either by ``mask`` or as
    all-NaN rows.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    embedding_ : ndarray of shape (n_samples, n_views * d)
        Fused embeddings after imputation.
    cluster_centers_ : ndarray of shape (n_clusters, n_views * d)
    autoencoders_ : list of ViewAutoencoder
    permutations_ : dict
        ``"i-j"`` -> prototype matching between views i and j.
    report_ : RunReport
    """

    def __init__(self, n_clusters: Optional[int] = None, *, d=10, batch_size=256,
                 pretrain_epochs=200, align_epochs=50, lr_pretrain=5e-4, lr_align=1e-4,
                 alpha=1e-3, beta=1e-3, tau=0.5, rank=1, loss_mode="cpspan",
                 hidden=(500, 500, 2000), dtype="float32", final_restarts=10,
                 random_state=0):
        self.n_clusters = n_clusters
        self.d = d
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.align_epochs = align_epochs
        self.lr_pretrain = lr_pretrain
        self.lr_align = lr_align
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.rank = rank
        self.loss_mode = loss_mode
        self.hidden = hidden
        self.dtype = dtype
        self.final_restarts = final_restarts
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, pretrain_epochs=self.pretrain_epochs,
            align_epochs=self.align_epochs, d=self.d, lr_pretrain=self.lr_pretrain,
            lr_align=self.lr_align, alpha=self.alpha, beta=self.beta, tau=self.tau,
            rank=self.rank, seed=int(self.random_state), loss_mode=self.loss_mode,
            hidden=tuple(self.hidden), dtype=self.dtype, n_clusters=self.n_clusters,
            final_restarts=self.final_restarts)

    def fit(self, X, y=None, mask=None):
        """Train on the views in ``X``.  ``y`` only sets the cluster count (and scores)."""
        config = self._config()
        views, mask = check_multiview(X, mask)
        labels = None if y is None else np.asarray(y)
        ds = MultiViewDataset(views, mask, labels, self.n_clusters)
        if ds.n_clusters is None:
            raise InvalidArgumentError("n_clusters is required when y is not given")
        report = run(ds, config)
        self.report_ = report
        self.labels_ = report.predicted
        self.embedding_ = report.fused
        self.cluster_centers_ = report.centers
        self.autoencoders_ = report.autoencoders
        self.permutations_ = report.permutations
        self.n_views_in_ = len(views)
        self.n_features_in_ = sum(v.shape[1] for v in views)
        return self

    def score(self, X=None, y=None, mask=None):
        """Clustering accuracy of the fitted labels against ``y``."""
        check_is_fitted(self, "labels_")
        if y is None:
            raise InvalidArgumentError("score needs ground-truth labels")
        return accuracy(self.labels_, y)[0]
