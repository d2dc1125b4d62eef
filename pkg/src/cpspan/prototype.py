"""Cluster prototypes and their cross-view alignment.

k-means gives each view a K x d prototype matrix.  Prototype sets of two views
are matched by a permutation ``P`` minimising ``|C_i - P C_j|_F^2``; the exact
matching comes from the Hungarian method, and a relaxed ``P`` trained by
gradient steps is pulled back towards the doubly-stochastic set by cyclic
projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .exceptions import InvalidArgumentError


@dataclass(eq=False)
class PrototypeSet:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    view_id: Optional[int] = None
    n_iter: int = 0
    inertia_history: list = field(default_factory=list, repr=False)

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # greedy k-means++: draw 2 + log(k) candidates per center, keep the one
    # that lowers the potential most
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            draws = rng.random(trials) * total
            cand = np.searchsorted(np.cumsum(closest), draws, side="right")
            cand = np.minimum(cand, n - 1)
            pots = np.minimum(closest[None, :], _sq_dists(x[cand], x)).sum(axis=1)
            idx = int(cand[np.argmin(pots)])
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i:i + 1])[:, 0])
    return centers


def _lloyd(x, centers, max_iter):
    k = centers.shape[0]
    centers = centers.copy()
    history = []
    labels = None
    rows = np.arange(len(x))
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=k)
        # an empty cluster takes the point farthest from its center
        for empty in np.flatnonzero(counts == 0):
            own = d[rows, new]
            own[counts[new] <= 1] = -1.0
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            centers[empty] = x[far]
            d[:, empty] = _sq_dists(x, centers[empty:empty + 1])[:, 0]
        history.append(float(d[rows, new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(_sq_dists(x, centers)[rows, labels].sum())
    history.append(inertia)
    return centers, labels, inertia, it, history


def kmeans(embeddings: np.ndarray, k: int, seed=0, max_iter: int = 300,
           n_init: int = 10, view_id: Optional[int] = None) -> PrototypeSet:
    """Greedy k-means++ seeding followed by Lloyd iterations.

    Each restart stops at an assignment fixpoint or after ``max_iter``
    iterations.  The restart with the lowest inertia is kept (first one on
    ties); a single run lands in poor local minima too often.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a 2-D array, got shape {x.shape}")
    if k < 1 or x.shape[0] < k:
        raise InvalidArgumentError(f"cannot form {k} clusters from {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, labels, inertia, it, hist = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = PrototypeSet(centers, labels, inertia, view_id, it, hist)
    return best


def cost_matrix(ci: np.ndarray, cj: np.ndarray) -> np.ndarray:
    """``D[k, l] = |ci_k - cj_l|^2``."""
    ci = np.asarray(ci, dtype=np.float64)
    cj = np.asarray(cj, dtype=np.float64)
    if ci.ndim != 2 or cj.ndim != 2 or ci.shape[1] != cj.shape[1]:
        raise InvalidArgumentError(f"incompatible prototype shapes {ci.shape}, {cj.shape}")
    diff = ci[:, None, :] - cj[None, :, :]
    return np.einsum("kld,kld->kl", diff, diff)


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Row -> column assignment of minimum total cost (square or wide matrix).

    Shortest augmenting path with row/column potentials, O(n^2 m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidArgumentError("cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise InvalidArgumentError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n > m:
        return _tall(cost)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


def _tall(cost):
    # more rows than columns: solve the transpose, unmatched rows get -1
    cols = linear_assignment(cost.T)
    out = np.full(cost.shape[0], -1, dtype=np.int64)
    out[cols] = np.arange(cost.shape[1])
    return out


def permutation_matrix(assignment: Sequence[int]) -> np.ndarray:
    assignment = np.asarray(assignment)
    p = np.zeros((len(assignment), len(assignment)))
    p[np.arange(len(assignment)), assignment] = 1.0
    return p


def hungarian(cost: np.ndarray):
    """Exact minimiser of ``Tr(D P^T)`` over K x K permutation matrices.

    Returns ``(P, optimal_cost)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidArgumentError(f"cost must be square, got {cost.shape}")
    assignment = linear_assignment(cost)
    return permutation_matrix(assignment), float(cost[np.arange(len(cost)), assignment].sum())


# --------------------------------------------------------------------------
# relaxed permutation

def project_nonnegative(p):
    return np.maximum(p, 0.0)


def project_row_sums(p):
    n = p.shape[0]
    return p - (p.sum(axis=1, keepdims=True) - 1.0) / n


def project_col_sums(p):
    n = p.shape[0]
    return p - (p.sum(axis=0, keepdims=True) - 1.0) / n


def constraint_residual(p: np.ndarray) -> float:
    """Largest violation among negativity, row-sum and column-sum constraints."""
    return float(max(max(0.0, -p.min()),
                     np.abs(p.sum(axis=1) - 1.0).max(),
                     np.abs(p.sum(axis=0) - 1.0).max()))


def project_cycle(p: np.ndarray, n_cycles: int = 1, tol: Optional[float] = None) -> np.ndarray:
    """Row-sum, column-sum, then non-negativity projection, ``n_cycles`` times.

    With ``tol`` set, stops early once :func:`constraint_residual` <= tol.
    """
    p = np.array(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise InvalidArgumentError(f"relaxed permutation must be square, got {p.shape}")
    for _ in range(n_cycles):
        if tol is not None and constraint_residual(p) <= tol:
            break
        p = project_nonnegative(project_col_sums(project_row_sums(p)))
    return p


@dataclass(eq=False)
class AlignmentState:
    """Relaxed and hard permutation mapping view ``view_j``'s prototypes onto ``view_i``'s."""

    relaxed: np.ndarray
    hard: np.ndarray
    view_i: int
    view_j: int

    def round(self) -> "AlignmentState":
        """Re-derive ``hard`` from ``relaxed`` (maximum-weight matching)."""
        hard, _ = hungarian(-self.relaxed)
        return AlignmentState(self.relaxed, hard, self.view_i, self.view_j)

    @property
    def assignment(self) -> np.ndarray:
        """``assignment[k]``: prototype of view j matched to prototype k of view i."""
        return np.argmax(self.hard, axis=1)


def prototype_alignment_loss(prototypes: Sequence[np.ndarray],
                             states: Mapping, return_grad: bool = False):
    """Sum over pairs of ``|C_i - P_ij C_j|_F^2 / K`` using the relaxed ``P``.

    ``states`` maps ``(i, j)`` to an :class:`AlignmentState` or a raw K x K
    array.  Gradients are returned as ``(loss, prototype_grads, p_grads)``
    with ``p_grads`` keyed like ``states``.
    """
    cs = [np.asarray(c, dtype=np.float64) for c in prototypes]
    loss = 0.0
    c_grads = [np.zeros_like(c) for c in cs]
    p_grads = {}
    for key, state in states.items():
        i, j = key
        p = state.relaxed if isinstance(state, AlignmentState) else np.asarray(state)
        k = cs[i].shape[0]
        if cs[i].shape != cs[j].shape or p.shape != (k, k):
            raise InvalidArgumentError(
                f"pair {key}: shapes {cs[i].shape}, {cs[j].shape}, P {p.shape} disagree")
        r = cs[i] - p @ cs[j]
        loss += float(np.sum(r * r)) / k
        if return_grad:
            c_grads[i] += (2.0 / k) * r
            c_grads[j] -= (2.0 / k) * p.T @ r
            p_grads[key] = -(2.0 / k) * r @ cs[j].T
    if return_grad:
        return loss, c_grads, p_grads
    return loss


def align_prototypes(prototypes: Sequence[np.ndarray]) -> dict:
    """Hungarian matching for every view pair ``i < j``.

    The relaxed matrix starts at the hard solution.
    """
    if len(prototypes) < 2:
        raise InvalidArgumentError("need at least two views to align")
    states = {}
    for i in range(len(prototypes)):
        for j in range(i + 1, len(prototypes)):
            hard, _ = hungarian(cost_matrix(prototypes[i], prototypes[j]))
            states[(i, j)] = AlignmentState(hard.copy(), hard, i, j)
    return states
