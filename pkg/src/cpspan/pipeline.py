"""Two-stage training, imputation, fusion and final clustering.

Stage 1 pretrains one autoencoder per view on reconstruction only.  Stage 2
continues training on

    L = L_rec + alpha * L_ia + beta * L_pa

where ``L_ia`` aligns the two view embeddings of pair-observed samples and
``L_pa`` aligns the per-view k-means prototypes through relaxed permutations.
Missing embeddings are then filled by cross-view neighbour transfer, views are
concatenated and clustered with k-means.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import alignment, nncore
from .data import MultiViewDataset, PairObservedIndex, all_pairs, resample_complete
from .exceptions import CPSPANError, InvalidArgumentError, StageError, TrainingDivergenceError
from .imputation import EmbeddingSet, fuse, impute
from .metrics import evaluate
from .prototype import (
    AlignmentState,
    align_prototypes,
    kmeans,
    project_cycle,
    prototype_alignment_loss,
)

logger = logging.getLogger(__name__)

LOSS_MODES = ("cpspan", "contrastive-baseline", "rec-only", "rec+ia", "rec+pa")

# which auxiliary terms each mode trains with
_TERMS = {
    "cpspan": {"ia", "pa"},
    "contrastive-baseline": {"cl", "pa"},
    "rec-only": set(),
    "rec+ia": {"ia"},
    "rec+pa": {"pa"},
}

# stream ids for derived seeds
_STREAM = {"init": 1, "pre-resample": 2, "pre-order": 3, "align-resample": 4,
           "align-order": 5, "align-kmeans": 6, "final-kmeans": 7, "report-kmeans": 8}


@dataclass
class TrainConfig:
    batch_size: int = 256
    pretrain_epochs: int = 200
    align_epochs: int = 50
    d: int = 10
    lr_pretrain: float = 5e-4
    lr_align: float = 1e-4
    alpha: float = 1e-3
    beta: float = 1e-3
    tau: float = 0.5
    rank: int = 1
    seed: int = 0
    loss_mode: str = "cpspan"
    hidden: tuple = (500, 500, 2000)
    dtype: str = "float32"
    n_clusters: Optional[int] = None
    projection_cycles: int = 20
    projection_tol: float = 1e-4
    final_restarts: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> "TrainConfig":
        positive = ("batch_size", "d", "lr_pretrain", "tau", "rank",
                    "projection_cycles", "final_restarts")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "align_epochs", "lr_align", "alpha", "beta",
                     "projection_tol"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidArgumentError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if any(h < 1 for h in self.hidden):
            raise InvalidArgumentError(f"hidden widths must be positive, got {self.hidden}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.n_clusters is not None and self.n_clusters < 1:
            raise InvalidArgumentError("n_clusters must be positive")
        return self

    @property
    def terms(self) -> set:
        return _TERMS[self.loss_mode]

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


def derive_seed(seed: int, stream: str, *keys: int) -> list:
    return [int(seed), _STREAM[stream], *[int(k) for k in keys]]


def _batches(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        yield order[start:start + size]


def n_clusters_for(ds: MultiViewDataset, config: TrainConfig) -> int:
    k = config.n_clusters if config.n_clusters is not None else ds.n_clusters
    if k is None:
        raise InvalidArgumentError("cluster count unknown: no labels and no n_clusters set")
    return int(k)


def init_autoencoders(ds: MultiViewDataset, config: TrainConfig) -> list:
    rng = np.random.default_rng(derive_seed(config.seed, "init"))
    return [nncore.ViewAutoencoder.build(dim, config.d, config.hidden, rng, view_id=v,
                                         dtype=np.dtype(config.dtype))
            for v, dim in enumerate(ds.dims)]


def embed_observed(ds: MultiViewDataset, aes: Sequence[nncore.ViewAutoencoder]) -> list:
    """N x d float64 embeddings per view; unobserved rows are zero and never computed."""
    out = []
    for v, ae in enumerate(aes):
        h = np.zeros((ds.n_samples, ae.n_embed))
        rows = ds.observed(v)
        h[rows] = nncore.encode(ae, ds.views[v][rows])
        out.append(h)
    return out


# --------------------------------------------------------------------------
# per-batch objective

@dataclass
class PrototypeContext:
    """Epoch-level prototype state used by the prototype alignment term.

    ``centers[v]`` are the means of ``epoch_embeddings[v]`` over the frozen
    ``assignments[v]`` (-1 for unobserved samples).  Inside a batch the
    prototypes are recomputed with the batch rows' current embeddings, so the
    term's gradient reaches those rows.
    """

    centers: list
    assignments: list
    counts: list
    epoch_embeddings: list
    states: dict


@dataclass
class BatchTerms:
    rec: float
    ia: Optional[float] = None
    pa: Optional[float] = None
    cl: Optional[float] = None
    total: float = 0.0

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def batch_objective(aes, xs, observed, batch_index, config: TrainConfig,
                    proto: Optional[PrototypeContext] = None, return_grad: bool = True):
    """Joint objective on one minibatch.

    ``xs[v]`` holds view v's rows for the batch (resample-completed);
    ``observed`` is the batch's B x V mask; ``batch_index`` the global sample
    ids (needed for prototype assignments).  Returns ``(terms, param_grads,
    p_grads)``; ``param_grads[v]`` is a name -> array dict for autoencoder v.
    """
    terms = config.terms
    n_views = len(aes)
    tapes_e, tapes_d, hs, recs = [], [], [], []
    rec_total = 0.0
    rec_grads = []
    for v, ae in enumerate(aes):
        te, td = nncore.Tape(), nncore.Tape()
        x = np.asarray(xs[v], dtype=ae.dtype)
        h = nncore.encode(ae, x, te)
        xr = nncore.decode(ae, h, td)
        loss, g = nncore.reconstruction_loss(x, xr, return_grad=True)
        rec_total += loss
        tapes_e.append(te)
        tapes_d.append(td)
        hs.append(h.astype(np.float64))
        rec_grads.append(g)
    out = BatchTerms(rec=rec_total)
    total = rec_total
    h_grads = [np.zeros_like(h) for h in hs]
    p_grads = {}

    if "ia" in terms:
        local = [PairObservedIndex(i, j, np.flatnonzero(observed[:, i] & observed[:, j]))
                 for i in range(n_views) for j in range(i + 1, n_views)]
        res = alignment.partial_sample_alignment_loss(hs, local, return_grad=return_grad)
        loss, g = res if return_grad else (res, None)
        out.ia = loss
        total += config.alpha * loss
        if return_grad:
            for v in range(n_views):
                h_grads[v] += config.alpha * g[v]

    if "cl" in terms:
        res = alignment.contrastive_loss(hs, config.tau, return_grad=return_grad)
        loss, g = res if return_grad else (res, None)
        out.cl = loss
        total += config.alpha * loss
        if return_grad:
            for v in range(n_views):
                h_grads[v] += config.alpha * g[v]

    if "pa" in terms:
        if proto is None:
            raise InvalidArgumentError("prototype alignment needs a PrototypeContext")
        centers, local_rows, local_assign = [], [], []
        for v in range(n_views):
            rows = np.flatnonzero(observed[:, v])
            a = proto.assignments[v][batch_index[rows]]
            delta = np.zeros_like(proto.centers[v])
            np.add.at(delta, a, hs[v][rows] - proto.epoch_embeddings[v][batch_index[rows]])
            centers.append(proto.centers[v] + delta / proto.counts[v][:, None])
            local_rows.append(rows)
            local_assign.append(a)
        res = prototype_alignment_loss(centers, proto.states, return_grad=return_grad)
        loss = res[0] if return_grad else res
        out.pa = loss
        total += config.beta * loss
        if return_grad:
            _, c_grads, pg = res
            for v in range(n_views):
                a = local_assign[v]
                h_grads[v][local_rows[v]] += (
                    config.beta * c_grads[v][a] / proto.counts[v][a][:, None])
            p_grads = {k: config.beta * g for k, g in pg.items()}

    out.total = total
    if not np.isfinite(total):
        raise TrainingDivergenceError(f"non-finite batch loss {total}")
    if not return_grad:
        return out, None, None
    param_grads = []
    for v, ae in enumerate(aes):
        gd, gh = nncore.backward(tapes_d[v], rec_grads[v])
        gh = gh + h_grads[v].astype(ae.dtype)
        ge, _ = nncore.backward(tapes_e[v], gh)
        param_grads.append({**ge, **gd})
    return out, param_grads, p_grads


# --------------------------------------------------------------------------
# stages

def pretrain(ds: MultiViewDataset, config: TrainConfig, autoencoders=None):
    """Reconstruction-only training of each view's autoencoder.

    Each epoch completes every view by resampling observed rows, then runs
    Adam over shuffled minibatches.  Returns ``(autoencoders, curve)`` where
    ``curve`` has one record per epoch.
    """
    config.validate()
    aes = ([ae.copy() for ae in autoencoders] if autoencoders is not None
           else init_autoencoders(ds, config))
    opts = [nncore.AdamState.for_params(ae.parameters(), config.lr_pretrain) for ae in aes]
    curve = []
    for epoch in range(config.pretrain_epochs):
        rec = 0.0
        for v, ae in enumerate(aes):
            index = resample_complete(ds, v, derive_seed(config.seed, "pre-resample", epoch, v))
            order = np.random.default_rng(
                derive_seed(config.seed, "pre-order", epoch, v)).permutation(ds.n_samples)
            losses = []
            params = ae.parameters()
            for batch in _batches(order, config.batch_size):
                x = np.asarray(ds.views[v][index[batch]], dtype=ae.dtype)
                te, td = nncore.Tape(), nncore.Tape()
                xr = nncore.decode(ae, nncore.encode(ae, x, te), td)
                loss, g = nncore.reconstruction_loss(x, xr, return_grad=True)
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(
                        f"non-finite reconstruction loss in pretraining epoch {epoch}",
                        epoch=epoch)
                gd, gh = nncore.backward(td, g)
                ge, _ = nncore.backward(te, gh)
                try:
                    nncore.adam_step(params, {**ge, **gd}, opts[v])
                except TrainingDivergenceError as exc:
                    exc.epoch = epoch
                    raise
                losses.append(loss)
            rec += float(np.mean(losses))
        curve.append({"stage": "pretrain", "epoch": epoch, "rec": rec, "total": rec})
        logger.debug("pretrain epoch %d: L_rec=%.6g", epoch, rec)
    return aes, curve


def prototype_context(ds, aes, config, epoch, states=None) -> PrototypeContext:
    k = n_clusters_for(ds, config)
    hs = embed_observed(ds, aes)
    centers, assigns, counts = [], [], []
    for v in range(ds.n_views):
        rows = ds.observed(v)
        proto = kmeans(hs[v][rows], k, derive_seed(config.seed, "align-kmeans", epoch, v),
                       view_id=v)
        a = np.full(ds.n_samples, -1, dtype=np.int64)
        a[rows] = proto.assignments
        c = np.bincount(proto.assignments, minlength=k).astype(np.float64)
        # centers as exact means of the frozen assignments
        means = np.zeros((k, hs[v].shape[1]))
        np.add.at(means, proto.assignments, hs[v][rows])
        centers.append(means / c[:, None])
        assigns.append(a)
        counts.append(c)
    if states is None:
        states = align_prototypes(centers)
    return PrototypeContext(centers, assigns, counts, hs, states)


def align_train(ds: MultiViewDataset, autoencoders, config: TrainConfig):
    """Joint training on the active loss terms.

    Returns ``(autoencoders, states, curve)``.  ``states`` are the relaxed and
    re-rounded permutations of the last epoch (empty without the prototype
    term).
    """
    config.validate()
    aes = [ae.copy() for ae in autoencoders]
    opts = [nncore.AdamState.for_params(ae.parameters(), config.lr_align) for ae in aes]
    terms = config.terms
    mask = ds.mask.astype(bool)
    curve = []
    states = {}
    for epoch in range(config.align_epochs):
        proto = None
        p_opt = None
        if "pa" in terms:
            proto = prototype_context(ds, aes, config, epoch)
            states = proto.states
            p_opt = nncore.AdamState.for_params(
                {f"{i}-{j}": s.relaxed for (i, j), s in states.items()}, config.lr_align)
        index = [resample_complete(ds, v, derive_seed(config.seed, "align-resample", epoch, v))
                 for v in range(ds.n_views)]
        order = np.random.default_rng(
            derive_seed(config.seed, "align-order", epoch)).permutation(ds.n_samples)
        sums = {}
        n_batches = 0
        for batch in _batches(order, config.batch_size):
            xs = [ds.views[v][index[v][batch]] for v in range(ds.n_views)]
            out, grads, p_grads = batch_objective(aes, xs, mask[batch], batch, config, proto)
            for v, ae in enumerate(aes):
                try:
                    nncore.adam_step(ae.parameters(), grads[v], opts[v])
                except TrainingDivergenceError as exc:
                    exc.epoch = config.pretrain_epochs + epoch
                    raise
            if p_grads:
                params = {f"{i}-{j}": s.relaxed for (i, j), s in states.items()}
                nncore.adam_step(params, {f"{i}-{j}": g for (i, j), g in p_grads.items()},
                                 p_opt)
                for key, s in states.items():
                    s.relaxed[...] = project_cycle(s.relaxed, config.projection_cycles,
                                                   config.projection_tol)
            for name, value in out.as_dict().items():
                sums[name] = sums.get(name, 0.0) + value
            n_batches += 1
        record = {"stage": "align", "epoch": config.pretrain_epochs + epoch}
        record.update({name: value / n_batches for name, value in sums.items()})
        curve.append(record)
        logger.debug("align epoch %d: %s", epoch, record)
    states = {key: s.round() for key, s in states.items()}
    return aes, states, curve


def final_alignment(ds, aes, config) -> dict:
    """Hungarian matching of freshly computed prototypes of the final embeddings."""
    if ds.n_views < 2:
        return {}
    k = n_clusters_for(ds, config)
    hs = embed_observed(ds, aes)
    centers = [kmeans(hs[v][ds.observed(v)], k,
                      derive_seed(config.seed, "report-kmeans", v)).centers
               for v in range(ds.n_views)]
    return align_prototypes(centers)


# --------------------------------------------------------------------------
# report

def _digest(records) -> str:
    payload = json.dumps([list(asdict(r).values()) for r in records]).encode()
    return hashlib.sha256(payload).hexdigest()


@dataclass(eq=False)
class RunReport:
    config: dict
    curves: list
    permutations: dict
    metrics: Optional[dict]
    timing: dict
    neighbor_log: list
    neighbor_digest: str
    predicted: np.ndarray = field(repr=False)
    fused: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)
    autoencoders: list = field(default_factory=list, repr=False)
    states: dict = field(default_factory=dict, repr=False)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "config": self.config,
            "curves": self.curves,
            "permutations": self.permutations,
            "metrics": self.metrics,
            "neighbor_log": {
                "count": len(self.neighbor_log),
                "sha256": self.neighbor_digest,
                "records": [asdict(r) for r in self.neighbor_log],
            },
            "predicted": [int(x) for x in self.predicted],
        }
        if timing:
            out["timing"] = self.timing
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (CPSPANError, ValueError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def cluster_embeddings(ds, aes, config: TrainConfig, rank: Optional[int] = None):
    """Embed, impute, fuse and cluster.  Returns ``(completed, fused, prototypes)``."""
    rank = config.rank if rank is None else rank
    emb = EmbeddingSet.from_observed(embed_observed(ds, aes), ds.mask)
    completed = impute(emb, all_pairs(ds), rank)
    fused = fuse(completed)
    proto = kmeans(fused, n_clusters_for(ds, config), derive_seed(config.seed, "final-kmeans"),
                   n_init=config.final_restarts)
    return completed, fused, proto


def finish_run(ds, config, aes, curves, states, timing, started) -> RunReport:
    """Everything after training: alignment report, imputation, clustering, metrics."""
    t = time.perf_counter()
    final = _stage("align", final_alignment, ds, aes, config)
    completed, fused, proto = _stage("impute", cluster_embeddings, ds, aes, config)
    timing["cluster"] = time.perf_counter() - t
    metrics = None
    if ds.labels is not None:
        metrics = _stage("evaluate", evaluate, proto.assignments, ds.labels).scores()
    timing["total"] = time.perf_counter() - started
    permutations = {f"{i}-{j}": [int(x) for x in s.assignment] for (i, j), s in final.items()}
    return RunReport(
        config=config.to_dict(), curves=curves, permutations=permutations, metrics=metrics,
        timing=timing, neighbor_log=completed.neighbor_log,
        neighbor_digest=_digest(completed.neighbor_log), predicted=proto.assignments,
        fused=fused, centers=proto.centers, autoencoders=aes, states=states)


def run(ds: MultiViewDataset, config: TrainConfig, pretrained=None) -> RunReport:
    """Full pipeline.

    ``pretrained`` may be a ``(autoencoders, curve)`` pair returned by
    :func:`pretrain` with the same config; the pretraining stage is then
    skipped, which lets several loss modes share one pretraining.
    """
    config.validate()
    n_clusters_for(ds, config)
    started = time.perf_counter()
    timing = {}
    if pretrained is None:
        aes, pre_curve = _stage("pretrain", pretrain, ds, config)
    else:
        aes, pre_curve = pretrained
    timing["pretrain"] = time.perf_counter() - started
    t = time.perf_counter()
    aes, states, align_curve = _stage("align", align_train, ds, aes, config)
    timing["align"] = time.perf_counter() - t
    return finish_run(ds, config, aes, list(pre_curve) + align_curve, states, timing, started)
