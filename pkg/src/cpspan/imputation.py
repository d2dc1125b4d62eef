"""Cross-view nearest-neighbour imputation of missing embeddings, and fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

from .alignment import NORM_FLOOR
from .data import PairObservedIndex
from .exceptions import DegenerateEmbeddingError, ImputationInfeasibleError, InvalidArgumentError

logger = logging.getLogger(__name__)


class Provenance(IntEnum):
    ABSENT = 0
    OBSERVED = 1
    IMPUTED = 2


@dataclass(frozen=True)
class NeighborRecord:
    sample: int
    view: int
    donor_view: int
    neighbor_row: int
    rank: int


@dataclass(eq=False)
class EmbeddingSet:
    """Per-view N x d embeddings with a provenance code per (sample, view)."""

    embeddings: list
    provenance: np.ndarray
    neighbor_log: list = field(default_factory=list)

    @classmethod
    def from_observed(cls, embeddings: Sequence[np.ndarray], mask: np.ndarray) -> "EmbeddingSet":
        """Wrap embeddings computed for observed cells; other rows are zeroed."""
        mask = np.asarray(mask)
        embs = []
        for v, h in enumerate(embeddings):
            h = np.array(h, dtype=np.float64, copy=True)
            h[mask[:, v] == 0] = 0.0
            embs.append(h)
        prov = np.where(mask == 1, Provenance.OBSERVED, Provenance.ABSENT).astype(np.int8)
        return cls(embs, prov)

    @property
    def n_views(self) -> int:
        return len(self.embeddings)

    @property
    def n_samples(self) -> int:
        return self.provenance.shape[0]

    def observed_mask(self) -> np.ndarray:
        return (self.provenance == Provenance.OBSERVED).astype(np.int8)


def _unit_rows(h):
    n = np.linalg.norm(h, axis=1)
    bad = np.flatnonzero(n < NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(f"row {int(bad[0])} has zero norm", row=int(bad[0]))
    return h / n[:, None]


def impute(emb: EmbeddingSet, pairs: Mapping, rank: int = 1) -> EmbeddingSet:
    """Fill every absent cell by copying a neighbour's embedding.

    For sample ``s`` missing in view ``a``, pick a donor view ``b`` in which
    ``s`` is observed (largest pool of samples observed in both ``a`` and
    ``b``; lowest view id on ties).  Rank that pool by cosine similarity to
    ``s`` in view ``b`` and copy the ``rank``-th most similar sample's view-a
    embedding.  ``rank`` larger than the pool is clamped to the pool size.
    """
    if rank < 1:
        raise InvalidArgumentError(f"rank must be >= 1, got {rank}")
    pools = {}
    for key, idx in pairs.items():
        i, j = key if not isinstance(idx, PairObservedIndex) else (idx.view_i, idx.view_j)
        rows = idx.rows if isinstance(idx, PairObservedIndex) else np.asarray(idx)
        pools[(i, j)] = pools[(j, i)] = rows
    observed = emb.provenance == Provenance.OBSERVED
    out = [h.copy() for h in emb.embeddings]
    prov = emb.provenance.copy()
    log = list(emb.neighbor_log)
    clamped = 0
    for a in range(emb.n_views):
        missing = np.flatnonzero(prov[:, a] == Provenance.ABSENT)
        if missing.size == 0:
            continue
        # donor view per missing sample
        sizes = np.array([pools[(a, b)].size if b != a and (a, b) in pools else -1
                          for b in range(emb.n_views)])
        donors = np.full(missing.size, -1)
        for pos, s in enumerate(missing):
            cand = [b for b in np.flatnonzero(observed[s]) if sizes[b] > 0]
            if not cand:
                raise ImputationInfeasibleError(
                    f"sample {int(s)} missing in view {a} has no donor pool in any observed view")
            donors[pos] = max(cand, key=lambda b: (sizes[b], -b))
        for b in np.unique(donors):
            targets = missing[donors == b]
            pool = pools[(a, b)]
            sim = _unit_rows(emb.embeddings[b][targets]) @ _unit_rows(emb.embeddings[b][pool]).T
            order = np.argsort(-sim, axis=1, kind="stable")
            r = min(rank, pool.size)
            if r < rank:
                clamped += targets.size
            chosen = pool[order[:, r - 1]]
            out[a][targets] = emb.embeddings[a][chosen]
            prov[targets, a] = Provenance.IMPUTED
            log.extend(NeighborRecord(int(s), a, int(b), int(c), r)
                       for s, c in zip(targets, chosen))
    if clamped:
        logger.warning("neighbor rank %d exceeded the donor pool for %d cells; "
                       "used the last pool member instead", rank, clamped)
    log.sort(key=lambda rec: (rec.view, rec.sample))
    return EmbeddingSet(out, prov, log)


def fuse(emb: EmbeddingSet) -> np.ndarray:
    """Concatenate the per-view embeddings in view order."""
    if np.any(emb.provenance == Provenance.ABSENT):
        s, v = np.argwhere(emb.provenance == Provenance.ABSENT)[0]
        raise InvalidArgumentError(f"cannot fuse: sample {s} has no embedding in view {v}")
    return np.hstack(emb.embeddings)
