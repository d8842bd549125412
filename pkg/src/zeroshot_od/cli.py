"""Command-line entry point: ``zeroshot-od <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 IO error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bench, dataio
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import (auroc, aupr, average_ranks, f1_at_true_count, performance_profile,
                         wilcoxon_one_sided)
from .infer import DEFAULT_CONTEXT_BUDGET, score
from .model import ModelConfig
from .prior import SynthesisError, draw_prior_dataset
from .rng import derive_rng
from .train import TrainConfig, load_train_config, loss_record_csv, pretrain
from .transform import apply_map, sample_linear_map

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "ZEROSHOT_OD_THREADS"
MODEL_KEYS = ("num_layers", "hidden", "heads", "routers", "ffn_multiplier", "precision")

log = logging.getLogger("zeroshot_od")


class ValidationError(ValueError):
    pass


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


@contextlib.contextmanager
def _thread_limit(threads: int | None):
    if not threads:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=threads):
        yield


# -- synth / transform ---------------------------------------------------------

def cmd_synth(args) -> int:
    _require(args.D >= 1, "--D must be >= 1")
    _require(args.M >= 1, "--M must be >= 1")
    _require(args.S >= 1, "--S must be >= 1")
    _require(0.0 < args.alpha < 1.0, "--alpha must lie in (0, 1)")
    _require(args.count >= 0, "--count must be >= 0")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(index: int) -> Path:
        ds = draw_prior_dataset(args.D, args.M, args.S, args.alpha,
                                lambda attempt: derive_rng(args.seed, "synth", index, attempt))
        return dataio.write_dataset(ds, out_dir / f"dataset_{index:05d}.csv")

    with ThreadPoolExecutor(max_workers=max(1, args.threads or 1)) as pool:
        for path in pool.map(one, range(args.count)):
            log.info("wrote %s", path)
    print(f"wrote {args.count} dataset(s) to {out_dir}")
    return EXIT_OK


def cmd_transform(args) -> int:
    ds = dataio.read_dataset(args.input)
    rng = derive_rng(args.seed, "cli-transform")
    dim = len(ds.inflated_dims) if args.mode == "subspace" else ds.d
    out = apply_map(ds, sample_linear_map(dim, rng), args.mode)
    dataio.write_dataset(out, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- pretrain ------------------------------------------------------------------

_TRAIN_FLAGS = {f.name: f.type for f in fields(TrainConfig)}


def _build_configs(args):
    base: dict = {}
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        base.update(resume.train_config)
        base.update({k: v for k, v in resume.model_config.to_dict().items() if k in MODEL_KEYS})
    if args.config:
        base.update(load_train_config(args.config))
    for name in list(_TRAIN_FLAGS) + list(MODEL_KEYS):
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    unknown = set(base) - set(_TRAIN_FLAGS) - set(MODEL_KEYS)
    if unknown:
        raise ValidationError(f"unknown config fields: {sorted(unknown)}")
    model_kw = {k: base.pop(k) for k in MODEL_KEYS if k in base}
    try:
        train_cfg = TrainConfig(**base)
        model_cfg = ModelConfig(max_dims=train_cfg.max_dims, **model_kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid configuration: {exc}") from exc
    return train_cfg, model_cfg, resume


def cmd_pretrain(args) -> int:
    train_cfg, model_cfg, resume = _build_configs(args)
    out = Path(args.out)
    last_path = Path(args.last) if args.last else out.with_name(out.stem + ".last.ckpt")
    loss_path = Path(args.loss_csv) if args.loss_csv else out.with_name(out.stem + ".loss.csv")
    resume_best = load_checkpoint(out) if resume is not None and out.exists() else None

    def report(epoch: int, loss: float) -> None:
        print(f"epoch {epoch:4d}  mean loss {loss:.6f}", flush=True)

    result = pretrain(train_cfg, model_cfg, resume=resume, resume_best=resume_best, on_epoch=report)
    save_checkpoint(result.best, out)
    save_checkpoint(result.last, last_path)
    text = loss_record_csv(result.losses)
    if resume is not None and loss_path.exists():
        text = loss_path.read_text(encoding="utf-8") + text.split("\n", 1)[1]
    loss_path.parent.mkdir(parents=True, exist_ok=True)
    loss_path.write_text(text, encoding="utf-8")
    print(f"best epoch loss {result.best.loss:.6f} at step {result.best.step}; "
          f"checkpoint {out}, last state {last_path}, losses {loss_path}")
    return EXIT_OK


# -- score ---------------------------------------------------------------------

def cmd_score(args) -> int:
    _require(args.context_budget >= 2, "--context-budget must be >= 2")
    cp = load_checkpoint(args.ckpt)
    X_train, y_train = dataio.read_table(args.train)
    if y_train is not None:
        X_train = X_train[y_train == 0]  # context is inlier-only
    X_test, _ = dataio.read_table(args.test)
    _require(X_train.shape[0] >= 1, f"{args.train}: no inlier rows")
    _require(X_test.shape[0] >= 1, f"{args.test}: no rows")
    _require(X_train.shape[1] == X_test.shape[1],
             f"feature count mismatch: train has {X_train.shape[1]}, test has {X_test.shape[1]}")
    t0 = time.perf_counter()
    scores = score(cp, X_train, X_test, args.context_budget, args.seed,
                   quantile=args.quantile == "on", strict=not args.grouped)
    elapsed = time.perf_counter() - t0
    dataio.write_scores(scores, args.out)
    print(f"scored {len(scores)} samples; mean latency {1000.0 * elapsed / len(scores):.3f} ms/sample")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_eval(args) -> int:
    scores_dir, labels_dir, out_dir = Path(args.scores), Path(args.labels), Path(args.out)
    if not scores_dir.is_dir():
        raise FileNotFoundError(f"scores directory not found: {scores_dir}")
    methods = sorted(p.name for p in scores_dir.iterdir() if p.is_dir())
    cells: dict[tuple[str, str], tuple[float, float, float]] = {}
    for method in methods:
        for path in sorted((scores_dir / method).glob("*.csv")):
            dataset = path.stem
            label_path = labels_dir / f"{dataset}.csv"
            if not label_path.exists():
                raise FileNotFoundError(f"missing label file for dataset {dataset!r}: {label_path}")
            _, labels = dataio.read_table(label_path, require_label=True)
            s = dataio.read_scores(path)
            _require(len(s) == len(labels),
                     f"{path}: {len(s)} scores but {len(labels)} labels in {label_path}")
            cells[(dataset, method)] = (auroc(s, labels), aupr(s, labels), f1_at_true_count(s, labels))
    _require(bool(cells), f"no score files found under {scores_dir}/<method>/<dataset>.csv")
    datasets = sorted({d for d, _ in cells})
    missing = [(d, m) for d in datasets for m in methods if (d, m) not in cells]
    _require(not missing, f"missing score files for (dataset, method): {missing[:5]}")
    methods = [m for m in methods if any((d, m) in cells for d in datasets)]

    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["dataset,method,auroc,aupr,f1"]
    for d in datasets:
        for m in methods:
            a, p, f = cells[(d, m)]
            lines.append(f"{d},{m},{_fmt(a)},{_fmt(p)},{_fmt(f)}")
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    tables = [np.array([[cells[(d, m)][k] for d in datasets] for m in methods]) for k in range(3)]
    ranks = [average_ranks(t, higher_is_better=True) for t in tables]
    positive = bool(np.all(tables[0] > 0))
    areas = performance_profile(tables[0])[1] if positive else None
    lines = ["method,avg_rank_auroc,avg_rank_aupr,avg_rank_f1,profile_area_auroc"]
    for i, m in enumerate(methods):
        area = _fmt(areas[i]["area"]) if areas else ""
        lines.append(f"{m},{_fmt(ranks[0][i])},{_fmt(ranks[1][i])},{_fmt(ranks[2][i])},{area}")
    (out_dir / "ranks.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    # Entry (row, col): p-value for H1 "row AUROC minus col AUROC > 0" across datasets.
    lines = ["method," + ",".join(methods)]
    for i, m in enumerate(methods):
        row = [_fmt(wilcoxon_one_sided(tables[0][i], tables[0][j])) for j in range(len(methods))]
        lines.append(m + "," + ",".join(row))
    (out_dir / "pvalues.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["method,tau,cdf"]
    if areas:
        for m, prof in zip(methods, areas):
            lines += [f"{m},{_fmt(t)},{_fmt(c)}" for t, c in zip(prof["tau"], prof["cdf"])]
    (out_dir / "profile.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"evaluated {len(methods)} method(s) on {len(datasets)} dataset(s); reports in {out_dir}")
    return EXIT_OK


# -- bench ---------------------------------------------------------------------

def cmd_bench_attention(args) -> int:
    modes = args.router or ["128"]
    sizes = args.context or [1000, 2000, 4000, 8000]
    _require(all(n >= 1 for n in sizes), "--context sizes must be >= 1")
    _require(args.trials >= 1, "--trials must be >= 1")
    rows = []
    for mode in modes:
        if mode == "dense":
            rows += bench.bench_attention("dense", sizes, args.trials, hidden=args.hidden,
                                          heads=args.heads, seed=args.seed)
        else:
            try:
                R = int(mode)
            except ValueError:
                raise ValidationError(f"--router takes an integer R or 'dense', got {mode!r}") from None
            _require(R >= 1, "--router R must be >= 1")
            rows += bench.bench_attention("router", sizes, args.trials, routers=R, hidden=args.hidden,
                                          heads=args.heads, seed=args.seed)
    text = bench.timings_csv(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _positive_threads(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    env_threads = os.environ.get(THREADS_ENV)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
    common.add_argument("--threads", type=_positive_threads,
                        default=int(env_threads) if env_threads else None,
                        help=f"cap on worker/BLAS threads (default: ${THREADS_ENV} or library default)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="zeroshot-od",
                                     description="Zero-shot tabular outlier detection with a "
                                                 "prior-fitted router-attention network.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize labeled prior datasets")
    p.add_argument("--D", type=int, default=100, help="maximum dimensionality")
    p.add_argument("--M", type=int, default=5, help="maximum number of mixture components")
    p.add_argument("--S", type=int, default=5000, help="samples per class")
    p.add_argument("--alpha", type=float, default=0.9, help="inlier percentile")
    p.add_argument("--count", type=int, default=1, help="number of datasets")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transform", parents=[common], help="apply a random label-preserving affine map")
    p.add_argument("--input", required=True, help="dataset CSV with its .meta.json sidecar")
    p.add_argument("--mode", choices=("subspace", "full"), default="subspace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("pretrain", parents=[common], help="fit the network to the data prior")
    p.add_argument("--config", help="JSON or key=value file; flags override its values")
    p.add_argument("--out", required=True, help="path of the best (lowest epoch loss) checkpoint")
    p.add_argument("--last", help="path of the final-state checkpoint (default: <out>.last.ckpt)")
    p.add_argument("--loss-csv", help="loss record path (default: <out>.loss.csv)")
    p.add_argument("--resume", help="continue from a final-state checkpoint")
    for name, kind in _TRAIN_FLAGS.items():
        if name == "seed":
            continue
        flag = "--" + name.replace("_", "-")
        if kind in (bool, "bool"):
            p.add_argument(flag, dest=name, type=lambda s: s.lower() in ("1", "true", "yes", "on"),
                           default=None, metavar="BOOL")
        else:
            caster = {"int": int, "float": float, "str": str}.get(kind if isinstance(kind, str)
                                                                  else kind.__name__, str)
            p.add_argument(flag, dest=name, type=caster, default=None)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--routers", type=int)
    p.add_argument("--ffn-multiplier", dest="ffn_multiplier", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("score", parents=[common], help="zero-shot outlier scores for a test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True, help="inlier-only context CSV (label column optional)")
    p.add_argument("--test", required=True, help="CSV to score (label column optional)")
    p.add_argument("--context-budget", type=int, default=DEFAULT_CONTEXT_BUDGET)
    p.add_argument("--quantile", choices=("on", "off"), default="on")
    p.add_argument("--grouped", action="store_true",
                   help="share one context subsample per 256 queries instead of one per query")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="metrics, ranks, p-values and profiles")
    p.add_argument("--scores", required=True, help="directory of <method>/<dataset>.csv score files")
    p.add_argument("--labels", required=True, help="directory of <dataset>.csv files with labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-attention", parents=[common], help="router vs dense forward timing")
    p.add_argument("--router", action="append",
                   help="router count R, or 'dense'; repeat for several modes (default: 128)")
    p.add_argument("--context", type=int, nargs="+", help="context sizes (default: 1000 2000 4000 8000)")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_bench_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "pretrain" and args.seed is None:
        args.seed = 0  # pretrain falls back to the config file's seed
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ArithmeticError, SynthesisError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
