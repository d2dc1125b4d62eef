"""Command-line interface.

Subcommands::

    generate         write a synthetic dataset as CSV
    run              train/evaluate over a missing-rate x seed grid
    ablate           loss-term ablation table over missing rates
    sensitivity      alpha x beta grid at one missing rate
    rank-sweep       imputation neighbour-rank sweep
    dump-embeddings  fused embeddings + labels + prototypes of a finished run

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore
from .data import (
    MaskSpec,
    MultiViewDataset,
    generate_mask,
    load_csv,
    load_csv_dir,
    save_csv,
    synth_gaussian,
    write_matrix,
    _read_labels,
    _read_matrix,
)
from .exceptions import CPSPANError, InvalidArgumentError
from .experiments import ABLATION_MODES, SENSITIVITY_GRID, masked_dataset
from .metrics import evaluate
from .pipeline import TrainConfig, align_train, finish_run, pretrain, run

logger = logging.getLogger("cpspan")

OUTPUT_ROOT_ENV = "CPSPAN_OUTPUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing

def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _paths(text):
    return [Path(x) for x in text.split(",") if x.strip()]


def _flag(parser, name, **kw):
    parser.add_argument(f"--{name}", f"--{name.replace('_', '-')}", dest=name, **kw)


def _add_synth(p):
    g = p.add_argument_group("synthetic data")
    _flag(g, "n", type=int, default=1000, help="samples")
    _flag(g, "n_views", type=int, default=3)
    _flag(g, "k", type=int, default=5, help="clusters")
    _flag(g, "dims", type=_ints, default=[20, 15, 10], help="per-view dims, e.g. 20,15,10")
    _flag(g, "separation", type=float, default=8.0)
    _flag(g, "data_seed", type=int, default=3)


def _add_source(p):
    g = p.add_argument_group("data source (default: synthetic)")
    _flag(g, "data", type=Path, help="directory written by 'generate'")
    _flag(g, "views", type=_paths, help="comma-separated view CSV files")
    _flag(g, "mask", type=Path, help="mask CSV (with --views)")
    _flag(g, "labels", type=Path, help="labels file (with --views)")
    _add_synth(p)


_CONFIG_TYPES = {
    "batch_size": int, "pretrain_epochs": int, "align_epochs": int, "d": int,
    "lr_pretrain": float, "lr_align": float, "alpha": float, "beta": float, "tau": float,
    "rank": int, "loss_mode": str, "hidden": _ints, "dtype": str, "n_clusters": int,
    "projection_cycles": int, "projection_tol": float, "final_restarts": int,
}


def _add_train(p, grid=True):
    g = p.add_argument_group("training (TrainConfig overrides)")
    for name, typ in _CONFIG_TYPES.items():
        _flag(g, name, type=typ, default=None)
    if grid:
        _flag(g, "missing_rates", type=_floats, default=None,
              help="comma-separated rates; omit to use the dataset's own mask")
    _flag(g, "seeds", type=_ints, default=[0])
    _flag(g, "out", type=Path, default=None,
          help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./cpspan-out)")
    _flag(g, "workers", type=int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpspan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    _add_synth(p)
    _flag(p, "missing_rate", type=float, default=0.0)
    _flag(p, "mask_seed", type=int, default=0)
    _flag(p, "out", type=Path, required=True)

    p = sub.add_parser("run", help="train and evaluate over rate x seed grids")
    _add_source(p)
    _add_train(p)

    p = sub.add_parser("ablate", help="loss-term ablation over missing rates")
    _add_source(p)
    _add_train(p)

    p = sub.add_parser("sensitivity", help="alpha x beta grid")
    _add_source(p)
    _add_train(p, grid=False)
    _flag(p, "missing_rate", type=float, default=0.5)
    _flag(p, "alphas", type=_floats, default=list(SENSITIVITY_GRID))
    _flag(p, "betas", type=_floats, default=list(SENSITIVITY_GRID))

    p = sub.add_parser("rank-sweep", help="imputation neighbour-rank sweep")
    _add_source(p)
    _add_train(p, grid=False)
    _flag(p, "missing_rate", type=float, default=0.5)
    _flag(p, "ranks", type=_ints, default=[1, 5, 10, 25])

    p = sub.add_parser("dump-embeddings", help="dump a finished run's fused embeddings")
    _flag(p, "run_dir", type=Path, required=True)
    _flag(p, "out", type=Path, default=None, help="default: <run_dir>/embeddings.csv")
    return parser


# --------------------------------------------------------------------------
# helpers

def load_source(args) -> tuple:
    """``(dataset, name)`` from the data-source flags."""
    if args.data is not None:
        return load_csv_dir(args.data, args.n_clusters), Path(args.data).name
    if args.views is not None:
        if args.mask is None:
            raise ConfigError("--views requires --mask")
        return load_csv(args.views, args.mask, args.labels, args.n_clusters), "csv"
    ds = synth_gaussian(args.n, args.n_views, args.k, args.dims, args.separation, args.data_seed)
    return ds, f"synth-n{args.n}-v{args.n_views}-k{args.k}-s{args.data_seed}"


def make_config(args, **extra) -> TrainConfig:
    overrides = {name: getattr(args, name) for name in _CONFIG_TYPES
                 if getattr(args, name, None) is not None}
    overrides.update(extra)
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    try:
        return TrainConfig(**overrides)
    except (InvalidArgumentError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def check_rates(rates, n_views) -> None:
    limit = (n_views - 1) / n_views
    for rate in rates:
        if rate is not None and not 0.0 <= rate < limit:
            raise ConfigError(f"missing rate {rate} outside [0, {limit:.3g}) for {n_views} views")


def output_root(args) -> Path:
    out = args.out or Path(os.environ.get(OUTPUT_ROOT_ENV, "cpspan-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rate_tag(rate) -> str:
    return "given" if rate is None else f"{rate:g}"


def run_dir_name(rate, seed, mode, **extra) -> str:
    parts = [f"rate-{_rate_tag(rate)}", f"seed-{seed}", f"mode-{mode}"]
    parts += [f"{k}-{v:g}" if isinstance(v, float) else f"{k}-{v}" for k, v in extra.items()]
    return "_".join(parts)


def write_run(directory: Path, report, ds: MultiViewDataset) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(report.to_json())
    keys = ["rec", "ia", "cl", "pa", "total"]
    with open(directory / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", *keys])
        for rec in report.curves:
            w.writerow([rec["stage"], rec["epoch"],
                        *[repr(rec[k]) if k in rec else "" for k in keys]])
    ckpt = directory / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for v, ae in enumerate(report.autoencoders):
        nncore.save_checkpoint(ae, ckpt / f"view_{v}.ckpt")
    write_matrix(directory / "fused.csv", report.fused)
    write_matrix(directory / "centers.csv", report.centers)
    np.savetxt(directory / "predicted.csv", report.predicted, fmt="%d")
    if ds.labels is not None:
        np.savetxt(directory / "labels.csv", ds.labels, fmt="%d")


@dataclass
class CellResult:
    rate: Optional[float]
    seed: int
    mode: str
    directory: str
    metrics: Optional[dict]
    error: Optional[str] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    rank: Optional[int] = None


def _execute(cells, workers):
    if workers <= 1 or len(cells) <= 1:
        return [fn() for fn in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [f.result() for f in [pool.submit(fn) for fn in cells]]


def _cell(base, rate, seed, config, variants, root, name_extra=None):
    """Run one (rate, seed) cell: shared pretraining, one report per variant."""
    results = []
    try:
        ds = masked_dataset(base, rate, seed)
        cfg = config.replace(seed=seed)
        shared = pretrain(ds, cfg)
    except Exception as exc:  # recorded per cell, grid continues
        logger.error("cell rate=%s seed=%s failed: %s", rate, seed, exc)
        return [CellResult(rate, seed, v.get("loss_mode", config.loss_mode), "", None,
                           f"{type(exc).__name__}: {exc}", **_tags(v)) for v in variants]
    for changes in variants:
        vcfg = cfg.replace(**changes)
        tags = _tags(changes)
        directory = root / run_dir_name(rate, seed, vcfg.loss_mode,
                                        **{k: v for k, v in tags.items() if v is not None})
        try:
            report = run(ds, vcfg, pretrained=shared)
            write_run(directory, report, ds)
            results.append(CellResult(rate, seed, vcfg.loss_mode, str(directory),
                                      report.metrics, **tags))
        except Exception as exc:
            logger.error("run %s failed: %s", directory.name, exc)
            logger.debug(traceback.format_exc())
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "error.json").write_text(json.dumps(
                {"error": f"{type(exc).__name__}: {exc}", "config": vcfg.to_dict()}, indent=2))
            results.append(CellResult(rate, seed, vcfg.loss_mode, str(directory), None,
                                      f"{type(exc).__name__}: {exc}", **tags))
    return results


def _tags(changes):
    return {"alpha": changes.get("alpha"), "beta": changes.get("beta")}


def write_runs_csv(path, dataset, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "missing_rate", "seed", "loss_mode", "alpha", "beta",
                    "acc", "nmi", "fmeasure", "status", "directory"])
        for r in results:
            m = r.metrics or {}
            w.writerow([dataset, _rate_tag(r.rate), r.seed, r.mode,
                        "" if r.alpha is None else repr(r.alpha),
                        "" if r.beta is None else repr(r.beta),
                        *[repr(m[k]) if k in m else "" for k in ("acc", "nmi", "fmeasure")],
                        "ok" if r.error is None else r.error, r.directory])


def summarize(results, key):
    """Group results by ``key`` and return mean/std rows of the three scores."""
    groups = {}
    for r in results:
        groups.setdefault(key(r), []).append(r)
    rows = []
    for k, rs in groups.items():
        ok = [r.metrics for r in rs if r.metrics is not None]
        row = {"key": k, "n_runs": len(ok), "n_failed": len(rs) - len(ok)}
        for name in ("acc", "nmi", "fmeasure"):
            vals = np.array([m[name] for m in ok]) if ok else np.array([np.nan])
            row[f"{name}_mean"] = float(vals.mean())
            row[f"{name}_std"] = float(vals.std())
        rows.append(row)
    return rows


def _failed(results) -> bool:
    return any(r.error is not None for r in results)


# --------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    ds = synth_gaussian(args.n, args.n_views, args.k, args.dims, args.separation, args.data_seed)
    if args.missing_rate > 0:
        ds = ds.with_mask(generate_mask(ds.n_samples, ds.n_views,
                                        MaskSpec(args.missing_rate, args.mask_seed)))
    paths = save_csv(ds, args.out)
    print(f"wrote {len(paths['views'])} views, mask and labels to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = make_config(args)
    base, name = load_source(args)
    root = output_root(args)
    rates = args.missing_rates or [None]
    check_rates(rates, base.n_views)
    cells = [lambda r=r, s=s: _cell(base, r, s, config, [{}], root)
             for r in rates for s in args.seeds]
    results = [x for cell in _execute(cells, args.workers) for x in cell]
    write_runs_csv(root / "runs.csv", name, results)
    rows = summarize(results, key=lambda r: _rate_tag(r.rate))
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["missing_rate", "n_runs", "n_failed", "acc_mean", "acc_std",
                    "nmi_mean", "nmi_std", "fmeasure_mean", "fmeasure_std"])
        for row in rows:
            w.writerow([row["key"], row["n_runs"], row["n_failed"],
                        *[repr(row[f"{m}_{s}"]) for m in ("acc", "nmi", "fmeasure")
                          for s in ("mean", "std")]])
    print(f"{len(results)} runs -> {root}")
    return EXIT_RUNTIME if _failed(results) else EXIT_OK


ABLATION_COMPONENTS = {
    "rec-only": (1, 0, 0), "rec+ia": (1, 1, 0), "rec+pa": (1, 0, 1), "cpspan": (1, 1, 1),
}


def cmd_ablate(args) -> int:
    config = make_config(args)
    base, name = load_source(args)
    root = output_root(args)
    rates = args.missing_rates or [None]
    check_rates(rates, base.n_views)
    variants = [{"loss_mode": m} for m in ABLATION_MODES]
    cells = [lambda r=r, s=s: _cell(base, r, s, config, variants, root)
             for r in rates for s in args.seeds]
    results = [x for cell in _execute(cells, args.workers) for x in cell]
    write_runs_csv(root / "runs.csv", name, results)
    table = {(row["key"]): row for row in summarize(results, key=lambda r: (r.mode, r.rate))}
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss_mode", "L_rec", "L_ia", "L_pa",
                    *[f"acc@{_rate_tag(r)}" for r in rates]])
        for mode in ABLATION_MODES:
            w.writerow([mode, *ABLATION_COMPONENTS[mode],
                        *[repr(table[(mode, r)]["acc_mean"]) for r in rates]])
    print(f"ablation table -> {root / 'ablation.csv'}")
    return EXIT_RUNTIME if _failed(results) else EXIT_OK


def cmd_sensitivity(args) -> int:
    config = make_config(args)
    base, name = load_source(args)
    root = output_root(args)
    check_rates([args.missing_rate], base.n_views)
    variants = [{"alpha": a, "beta": b} for a in args.alphas for b in args.betas]
    cells = [lambda s=s: _cell(base, args.missing_rate, s, config, variants, root)
             for s in args.seeds]
    results = [x for cell in _execute(cells, args.workers) for x in cell]
    write_runs_csv(root / "runs.csv", name, results)
    rows = summarize(results, key=lambda r: (r.alpha, r.beta))
    with open(root / "sensitivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "beta", "missing_rate", "n_runs", "acc_mean", "acc_std",
                    "nmi_mean", "fmeasure_mean"])
        for row in rows:
            a, b = row["key"]
            w.writerow([repr(a), repr(b), _rate_tag(args.missing_rate), row["n_runs"],
                        repr(row["acc_mean"]), repr(row["acc_std"]),
                        repr(row["nmi_mean"]), repr(row["fmeasure_mean"])])
    print(f"{len(rows)} grid cells -> {root / 'sensitivity.csv'}")
    return EXIT_RUNTIME if _failed(results) else EXIT_OK


def cmd_rank_sweep(args) -> int:
    config = make_config(args)
    base, name = load_source(args)
    root = output_root(args)
    check_rates([args.missing_rate], base.n_views)
    rows = []
    failed = False
    for seed in args.seeds:
        try:
            ds = masked_dataset(base, args.missing_rate, seed)
            cfg = config.replace(seed=seed)
            aes, pre = pretrain(ds, cfg)
            aes, states, post = align_train(ds, aes, cfg)
        except (CPSPANError, ValueError) as exc:
            logger.error("seed %s failed: %s", seed, exc)
            failed = True
            continue
        for rank in args.ranks:
            rcfg = cfg.replace(rank=rank)
            report = finish_run(ds, rcfg, aes, pre + post, states, {}, 0.0)
            directory = root / run_dir_name(args.missing_rate, seed, rcfg.loss_mode, rank=rank)
            write_run(directory, report, ds)
            rows.append((rank, seed, report.metrics))
    with open(root / "rank_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "seed", "missing_rate", "acc", "nmi", "fmeasure"])
        for rank, seed, m in rows:
            m = m or {}
            w.writerow([rank, seed, _rate_tag(args.missing_rate),
                        *[repr(m[k]) if k in m else "" for k in ("acc", "nmi", "fmeasure")]])
    print(f"{len(rows)} rank/seed cells -> {root / 'rank_sweep.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_dump_embeddings(args) -> int:
    """Rows: one per sample, then one per prototype (kind column tells them apart)."""
    d = Path(args.run_dir)
    needed = ["fused.csv", "centers.csv", "predicted.csv"]
    missing = [f for f in needed if not (d / f).exists()]
    if missing:
        raise ConfigError(f"{d} is missing run artifacts: {', '.join(missing)}")
    fused = _read_matrix(d / "fused.csv")
    centers = _read_matrix(d / "centers.csv")
    pred = _read_labels(d / "predicted.csv")
    truth = _read_labels(d / "labels.csv") if (d / "labels.csv").exists() else None
    out = args.out or d / "embeddings.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", *[f"h{i}" for i in range(fused.shape[1])],
                    "predicted", "true"])
        for i, row in enumerate(fused):
            w.writerow(["sample", i, *[repr(float(x)) for x in row], int(pred[i]),
                        "" if truth is None else int(truth[i])])
        for k, row in enumerate(centers):
            w.writerow(["prototype", k, *[repr(float(x)) for x in row], k, ""])
    print(f"{fused.shape[0]} samples + {centers.shape[0]} prototypes -> {out}")
    return EXIT_OK


def read_dump(path):
    """Parse a dump-embeddings CSV into ``(coords, predicted, truth, is_prototype)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    kinds = np.array([r[0] for r in body])
    coords = np.array([[float(x) for x in r[2:-2]] for r in body])
    pred = np.array([int(r[-2]) for r in body])
    truth = np.array([int(r[-1]) if r[-1] != "" else -1 for r in body])
    return coords, pred, truth, kinds == "prototype"


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity,
    "rank-sweep": cmd_rank_sweep,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CPSPANError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
