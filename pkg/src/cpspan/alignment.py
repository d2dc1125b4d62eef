"""Cross-view sample alignment losses.

``partial_sample_alignment_loss`` pushes the cosine between the two view
embeddings of each pair-observed sample towards 1 and leaves every other
sample pair unconstrained.  ``contrastive_loss`` is the usual multi-view
InfoNCE-style objective, kept as a comparison baseline.

Loss functions return a float, or ``(loss, grads)`` with ``return_grad=True``
where ``grads`` is a list with one array per view shaped like the input.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .data import PairObservedIndex
from .exceptions import DegenerateEmbeddingError, InvalidArgumentError

NORM_FLOOR = 1e-12


def _norms(h: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(h, axis=1)
    bad = np.flatnonzero(n < NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"{what} row {int(bad[0])} has norm {n[bad[0]]:.3g}; cosine is undefined",
            row=int(bad[0]))
    return n


def cosine_similarity(hp: np.ndarray, hq: np.ndarray) -> np.ndarray:
    """``S[p, q] = <hp_p, hq_q> / (|hp_p| |hq_q|)``."""
    hp = np.asarray(hp, dtype=np.float64)
    hq = np.asarray(hq, dtype=np.float64)
    if hp.ndim != 2 or hp.shape[1] != hq.shape[1]:
        raise InvalidArgumentError(f"incompatible shapes {hp.shape} and {hq.shape}")
    a = hp / _norms(hp, "hp")[:, None]
    b = hq / _norms(hq, "hq")[:, None]
    return a @ b.T


def paired_cosine(a: np.ndarray, b: np.ndarray, return_grad: bool = False):
    """Row-wise cosine ``cos(a_r, b_r)``, i.e. the diagonal of ``cosine_similarity(a, b)``.

    With ``return_grad`` also returns ``d cos_r / d a_r`` and ``d cos_r / d b_r``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    na = _norms(a, "view i embedding")
    nb = _norms(b, "view j embedding")
    cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    if not return_grad:
        return cos
    da = b / (na * nb)[:, None] - cos[:, None] * a / (na ** 2)[:, None]
    db = a / (na * nb)[:, None] - cos[:, None] * b / (nb ** 2)[:, None]
    return cos, da, db


def partial_sample_alignment_loss(embeddings: Sequence[np.ndarray],
                                  pairs: Mapping | Sequence[PairObservedIndex],
                                  return_grad: bool = False):
    """Sum over view pairs of ``|diag(S) - 1|^2 / N_ij``.

    ``embeddings[v]`` is indexed by sample; only the rows listed in each
    pair's index are read.  Pairs with no shared samples are skipped.
    """
    if isinstance(pairs, Mapping):
        pairs = list(pairs.values())
    grads = [np.zeros(np.shape(h), dtype=np.float64) for h in embeddings] if return_grad else None
    loss = 0.0
    for pair in pairs:
        if pair.count == 0:
            continue
        rows = pair.rows
        a = embeddings[pair.view_i][rows]
        b = embeddings[pair.view_j][rows]
        if return_grad:
            cos, da, db = paired_cosine(a, b, return_grad=True)
        else:
            cos = paired_cosine(a, b)
        r = cos - 1.0
        loss += float(r @ r) / pair.count
        if return_grad:
            coef = (2.0 / pair.count) * r[:, None]
            np.add.at(grads[pair.view_i], rows, coef * da)
            np.add.at(grads[pair.view_j], rows, coef * db)
    if return_grad:
        return loss, grads
    return loss


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def contrastive_loss(embeddings: Sequence[np.ndarray], tau: float = 0.5,
                     return_grad: bool = False):
    """Multi-view contrastive loss on complete embeddings (raw inner products).

    For sample i in view v the positives are the same sample in every other
    view r; the denominator sums ``exp(<h_i^v, h_j^t> / tau)`` over all other
    views t and all other samples j != i.  The total is averaged over N.
    """
    if not tau > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {tau}")
    hs = [np.asarray(h, dtype=np.float64) for h in embeddings]
    n_views = len(hs)
    grads = [np.zeros_like(h) for h in hs] if return_grad else None
    if n_views < 2:
        return (0.0, grads) if return_grad else 0.0
    n = hs[0].shape[0]
    if n < 2:
        raise InvalidArgumentError("contrastive loss needs at least 2 samples")
    if any(h.shape != hs[0].shape for h in hs):
        raise InvalidArgumentError("all views must share the embedding shape")
    off_diag = ~np.eye(n, dtype=bool)
    total = 0.0
    for v in range(n_views):
        others = [t for t in range(n_views) if t != v]
        # logits[t][i, j] = <h_i^v, h_j^t> / tau, diagonal (j == i) excluded
        logits = np.stack([hs[v] @ hs[t].T / tau for t in others])  # (V-1, n, n)
        masked = np.where(off_diag[None], logits, -np.inf)
        flat = masked.transpose(1, 0, 2).reshape(n, -1)               # (n, (V-1) n)
        lse = _logsumexp(flat, axis=1)
        positives = np.stack([np.diagonal(lg) for lg in logits])     # (V-1, n)
        total += float(np.sum((n_views - 1) * lse - positives.sum(axis=0)))
        if return_grad:
            w = np.exp(flat - lse[:, None]).reshape(n, len(others), n).transpose(1, 0, 2)
            w *= (n_views - 1) / (tau * n)
            for k, t in enumerate(others):
                grads[v] += w[k] @ hs[t] - hs[t] / (tau * n)
                grads[t] += w[k].T @ hs[v] - hs[v] / (tau * n)
    loss = total / n
    if return_grad:
        return loss, grads
    return loss
