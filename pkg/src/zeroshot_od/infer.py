"""Zero-shot scoring of an unseen dataset with a pretrained checkpoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .model import pfn_forward
from .rng import derive_rng
from .special import ndtri

MAX_QUANTILES = 1000
CLIP = 8.0
DEFAULT_CONTEXT_BUDGET = 5000
GROUP_SIZE = 256
_QUERY_BATCH = 2048


@dataclass(frozen=True, eq=False)
class QuantileTransformer:
    """Per-feature empirical quantile grid mapped to a standard normal."""

    quantiles: np.ndarray  # n_quantiles x d, non-decreasing per column
    references: np.ndarray  # n_quantiles, in [0, 1]
    constant: np.ndarray  # d booleans

    @property
    def d(self) -> int:
        return self.quantiles.shape[1]


def qt_fit(X_train) -> QuantileTransformer:
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("quantile transform needs at least 2 rows of a 2-d matrix")
    n_q = min(MAX_QUANTILES, X.shape[0])
    refs = np.linspace(0.0, 1.0, n_q)
    quantiles = np.quantile(X, refs, axis=0)
    quantiles = np.maximum.accumulate(quantiles, axis=0)
    constant = quantiles[-1] == quantiles[0]
    return QuantileTransformer(quantiles, refs, constant)


def qt_apply(qt: QuantileTransformer, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != qt.d:
        raise ValueError(f"transformer was fit on {qt.d} features, got {X.shape[1]}")
    out = np.zeros_like(X)
    refs = qt.references
    for j in range(qt.d):
        if qt.constant[j]:
            continue
        q = qt.quantiles[:, j]
        x = X[:, j]
        # Averaging the forward and reversed interpolation splits runs of
        # repeated quantiles evenly instead of jumping to their upper end.
        cdf = 0.5 * (np.interp(x, q, refs) - np.interp(-x, -q[::-1], -refs[::-1]))
        cdf[x <= q[0]] = 0.0
        cdf[x >= q[-1]] = 1.0
        with np.errstate(divide="ignore"):
            out[:, j] = np.clip(ndtri(cdf), -CLIP, CLIP)
    return out


def params_as_nodes(cp: Checkpoint) -> dict:
    dtype = cp.model_config.dtype
    return {k: ad.constant(np.asarray(v, dtype=dtype)) for k, v in cp.params.items()}


def _forward_probs(params, config, context, queries, seed: int) -> np.ndarray:
    out = []
    for start in range(0, queries.shape[0], _QUERY_BATCH):
        # Same feature-subset draw for every call so columns line up across batches.
        rng = derive_rng(seed, "feature-subset")
        _, probs = pfn_forward(params, config, context, queries[start:start + _QUERY_BATCH], rng)
        out.append(probs[:, 1])
    return np.concatenate(out)


def score(cp: Checkpoint, X_train, X_test, context_budget: int = DEFAULT_CONTEXT_BUDGET,
          seed: int = 0, quantile: bool = True, strict: bool = True) -> np.ndarray:
    """Outlier probability for each row of ``X_test`` given inlier-only ``X_train``.

    When ``X_train`` has more than ``context_budget - 1`` rows the context is
    subsampled: one fresh subsample per query in strict mode, one per group
    of 256 queries otherwise.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if X_train.shape[1] == 0:
        raise ValueError("datasets must have at least one feature")
    if X_train.shape[1] != X_test.shape[1]:
        raise ValueError(f"train has {X_train.shape[1]} features, test has {X_test.shape[1]}")
    if X_train.shape[0] < 1:
        raise ValueError("need at least one training row")
    if context_budget < 2:
        raise ValueError("context_budget must be >= 2")
    if quantile:
        qt = qt_fit(X_train) if X_train.shape[0] >= 2 else None
        if qt is not None:
            X_train, X_test = qt_apply(qt, X_train), qt_apply(qt, X_test)

    params = params_as_nodes(cp)
    config = cp.model_config
    n, q = X_train.shape[0], X_test.shape[0]
    size = context_budget - 1
    with ad.no_grad():
        if n <= size:
            return _forward_probs(params, config, X_train, X_test, seed)
        scores = np.empty(q)
        group = 1 if strict else GROUP_SIZE
        for g, start in enumerate(range(0, q, group)):
            idx = derive_rng(seed, "context", g).choice(n, size=size, replace=False)
            rows = slice(start, start + group)
            scores[rows] = _forward_probs(params, config, X_train[idx], X_test[rows], seed)
        return scores
