"""Prior fitting: train the router-attention network on synthetic OD tasks.

Epochs ``1..P`` build a buffer of ``Q`` step-slots each holding ``B``
datasets.  The first ``q`` slots are freshly synthesized; slot ``j > q``
reuses slot ``(j - 1) mod q`` under a fresh random affine map.  Epochs after
``P`` replay the buffer of epoch ``(i - 1) mod P`` with a fresh map applied to
every dataset.  Every dataset and map is derived from the master seed and its
(epoch, slot, member) position, so a run can be replayed or resumed exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .evaluation import auroc
from .model import ModelConfig, init_params, pfn_forward
from .prior import LabeledDataset, draw_prior_dataset
from .rng import derive_rng
from .transform import apply_map, preservation_report, sample_linear_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_datasets: int = 4
    unique_per_epoch: int = 50
    periodicity: int = 20
    context_min: int = 50
    context_max: int = 300
    samples_per_class: int = 500
    percentile: float = 0.9
    max_dims: int = 5
    max_clusters: int = 5
    transform_mode: str = "subspace"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    verify_transforms: bool = True

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.steps_per_epoch < 1:
            problems.append("steps_per_epoch must be >= 1")
        if self.batch_datasets < 1:
            problems.append("batch_datasets must be >= 1")
        if not 1 <= self.unique_per_epoch <= self.steps_per_epoch:
            problems.append("unique_per_epoch must lie in [1, steps_per_epoch]")
        if not 1 <= self.periodicity <= self.epochs:
            problems.append("periodicity must lie in [1, epochs]")
        if not 1 <= self.context_min <= self.context_max < self.samples_per_class:
            problems.append("need 1 <= context_min <= context_max < samples_per_class")
        if not 0.0 < self.percentile < 1.0:
            problems.append("percentile must lie in (0, 1)")
        if self.max_dims < 1 or self.max_clusters < 1:
            problems.append("max_dims and max_clusters must be >= 1")
        if self.transform_mode not in ("subspace", "full"):
            problems.append("transform_mode must be 'subspace' or 'full'")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**obj)


def make_training_task(ds: LabeledDataset, n_min: int, n_max: int, rng: np.random.Generator):
    """Split a labeled dataset into an inlier-only context and a balanced,
    shuffled query set.  Returns ``(context, queries, query_labels)``."""
    inliers, outliers = ds.inliers, ds.outliers
    S = inliers.shape[0]
    if n_max >= S:
        raise ValueError(f"context_max={n_max} must be below the inlier count {S}")
    if not 1 <= n_min <= n_max:
        raise ValueError("need 1 <= n_min <= n_max")
    n = int(rng.integers(n_min, n_max + 1))
    perm = rng.permutation(S)
    context = inliers[perm[:n]]
    test_in = inliers[perm[n:]]
    n_out = min(S - n, outliers.shape[0])
    test_out = outliers[rng.choice(outliers.shape[0], size=n_out, replace=False)]
    queries = np.concatenate([test_in, test_out])
    labels = np.concatenate([np.zeros(len(test_in), np.int64), np.ones(n_out, np.int64)])
    order = rng.permutation(len(labels))
    return context, queries[order], labels[order]


def draw_dataset(cfg: TrainConfig, *position: int) -> LabeledDataset:
    """Synthesize the prior dataset assigned to ``position``."""
    return draw_prior_dataset(cfg.max_dims, cfg.max_clusters, cfg.samples_per_class, cfg.percentile,
                              lambda attempt: derive_rng(cfg.seed, "synth", *position, attempt))


class DataSchedule:
    """Produces the datasets of each epoch following the two reuse rules."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.buffers: list[list[list[LabeledDataset]]] = []
        self.unique_count = 0
        self.transform_count = 0

    def _transform(self, ds: LabeledDataset, *position: int) -> LabeledDataset:
        rng = derive_rng(self.cfg.seed, "transform", *position)
        dim = len(ds.inflated_dims) if self.cfg.transform_mode == "subspace" else ds.d
        lmap = sample_linear_map(dim, rng)
        out = apply_map(ds, lmap, self.cfg.transform_mode)
        self.transform_count += 1
        if self.cfg.verify_transforms:
            report = preservation_report(ds, out)
            if report["label_flips"]:
                raise ArithmeticError(f"transform at {position} flipped {report['label_flips']} labels")
        return out

    def epoch(self, i: int) -> list[list[LabeledDataset]]:
        """Datasets for epoch ``i`` (1-based) as ``Q`` slots of ``B`` datasets."""
        cfg = self.cfg
        if i <= cfg.periodicity:
            if len(self.buffers) >= i:
                return self.buffers[i - 1]
            slots: list[list[LabeledDataset]] = []
            for j in range(1, cfg.steps_per_epoch + 1):
                if j <= cfg.unique_per_epoch:
                    slot = [draw_dataset(cfg, i, j, b) for b in range(cfg.batch_datasets)]
                    self.unique_count += len(slot)
                else:
                    src = slots[(j - 1) % cfg.unique_per_epoch]
                    slot = [self._transform(ds, i, j, b) for b, ds in enumerate(src)]
                slots.append(slot)
            self.buffers.append(slots)
            return slots
        replay = self.buffers[(i - 1) % cfg.periodicity]
        return [[self._transform(ds, i, j, b) for b, ds in enumerate(slot)]
                for j, slot in enumerate(replay, start=1)]


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    losses: list[tuple[int, int, float]]  # (step, epoch, loss)
    epoch_losses: list[float]
    unique_datasets: int
    transformed_datasets: int
    seconds: float


def _snapshot(params: dict) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in params.items()}


def task_loss(params, model_cfg: ModelConfig, ds: LabeledDataset, cfg: TrainConfig,
              rng: np.random.Generator) -> ad.Node:
    context, queries, labels = make_training_task(ds, cfg.context_min, cfg.context_max, rng)
    logits, _ = pfn_forward(params, model_cfg, context, queries, rng)
    return ad.cross_entropy_mean(logits, labels)


def pretrain(cfg: TrainConfig, model_cfg: ModelConfig, resume: Checkpoint | None = None,
             resume_best: Checkpoint | None = None, on_epoch=None) -> TrainResult:
    """Run prior fitting; returns the lowest-epoch-loss checkpoint and the last state."""
    t0 = time.perf_counter()
    params = init_params(model_cfg, derive_rng(cfg.seed, "init"))
    opt = ad.AdamState(params)
    start_epoch = 1
    losses: list[tuple[int, int, float]] = []
    epoch_losses: list[float] = []
    best: Checkpoint | None = None
    if resume is not None:
        if resume.model_config != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        for k, v in resume.params.items():
            params[k].value = v.astype(model_cfg.dtype).copy()
        if resume.optimizer is not None:
            opt.t = resume.optimizer["t"]
            opt.m = {k: v.copy() for k, v in resume.optimizer["m"].items()}
            opt.v = {k: v.copy() for k, v in resume.optimizer["v"].items()}
        if resume.step % cfg.steps_per_epoch:
            raise ValueError("can only resume from an epoch boundary")
        start_epoch = resume.step // cfg.steps_per_epoch + 1
        epoch_losses = list(resume.extra.get("epoch_losses", []))
        best = resume_best

    schedule = DataSchedule(cfg)
    # Rebuild the reuse buffers deterministically when resuming.
    for i in range(1, min(start_epoch - 1, cfg.periodicity) + 1):
        schedule.epoch(i)

    step = (start_epoch - 1) * cfg.steps_per_epoch
    for i in range(start_epoch, cfg.epochs + 1):
        slots = schedule.epoch(i)
        step_losses = []
        for j, slot in enumerate(slots, start=1):
            ad.zero_grad(params.values())
            task_losses = [task_loss(params, model_cfg, ds, cfg, derive_rng(cfg.seed, "task", i, j, b))
                           for b, ds in enumerate(slot)]
            loss = ad.mean_nodes(task_losses)
            ad.backward(loss)
            ad.adam_step(params, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            step += 1
            value = float(loss.value)
            losses.append((step, i, value))
            step_losses.append(value)
        mean_loss = float(np.mean(step_losses))
        epoch_losses.append(mean_loss)
        log.info("epoch %d/%d mean loss %.4f", i, cfg.epochs, mean_loss)
        if best is None or mean_loss < best.loss:
            best = Checkpoint(model_cfg, cfg.to_dict(), _snapshot(params), step, mean_loss)
        if on_epoch is not None:
            on_epoch(i, mean_loss)

    last = Checkpoint(model_cfg, cfg.to_dict(), _snapshot(params), step,
                      epoch_losses[-1] if epoch_losses else float("nan"),
                      {"t": opt.t, "m": {k: v.copy() for k, v in opt.m.items()},
                       "v": {k: v.copy() for k, v in opt.v.items()}},
                      {"epoch_losses": epoch_losses})
    if best is None:
        best = last
    return TrainResult(best, last, losses, epoch_losses, schedule.unique_count,
                       schedule.transform_count, time.perf_counter() - t0)


def heldout_aurocs(cp: Checkpoint, cfg: TrainConfig, count: int = 20, seed: int = 12345) -> list[float]:
    """AUROC of the model on fresh prior datasets it never trained on."""
    from .infer import params_as_nodes

    held = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    params = params_as_nodes(cp)
    out = []
    with ad.no_grad():
        for k in range(count):
            ds = draw_dataset(held, 0, 0, k)
            rng = derive_rng(seed, "heldout-task", k)
            context, queries, labels = make_training_task(ds, held.context_min, held.context_max, rng)
            _, probs = pfn_forward(params, cp.model_config, context, queries, rng)
            out.append(auroc(probs[:, 1], labels))
    return out


def load_train_config(path) -> dict:
    """Read a JSON object or flat ``key=value`` file into a dict of raw values."""
    text = open(path, encoding="utf-8").read()
    stripped = text.strip()
    if stripped.startswith("{"):
        return json.loads(stripped)
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(value)
        except ValueError:
            pass
    return value


def loss_record_csv(losses) -> str:
    lines = ["step,epoch,loss"]
    lines += [f"{s},{e},{l!r}" for s, e, l in losses]
    return "\n".join(lines) + "\n"
