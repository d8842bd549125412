"""GMM data prior: hypothesis sampling and labeled inlier/outlier synthesis.

A point is an outlier for a mixture iff its squared Mahalanobis distance to
*every* component exceeds the chi-square ``alpha`` quantile; it is an inlier
otherwise (points exactly on the threshold are inliers).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from .special import chi2_quantile

INFLATION_FACTOR = 5.0
CENTER_RANGE = (-5.0, 5.0)
VARIANCE_RANGE = (0.1, 5.0)
REJECTION_BUDGET = 1000  # attempted draws per requested sample
SYNTHESIS_ATTEMPTS = 10


class SynthesisError(RuntimeError):
    """Rejection sampling ran out of budget; redraw the hypothesis and retry."""


@dataclass(frozen=True, eq=False)
class GmmSpec:
    """Mixture of axis-aligned Gaussians."""

    weights: np.ndarray
    centers: np.ndarray
    diag_covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.diag_covs, dtype=np.float64))
        if c.shape != v.shape:
            raise ValueError(f"centers {c.shape} and diag_covs {v.shape} differ in shape")
        if w.shape != (c.shape[0],):
            raise ValueError(f"weights must have length {c.shape[0]}, got shape {w.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("diagonal variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "diag_covs", v)

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def component_distances(self, X: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance of each row to each component, ``n x m``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features, got {X.shape[1]}")
        out = np.empty((X.shape[0], self.m))
        for j in range(self.m):
            out[:, j] = (((X - self.centers[j]) ** 2) / self.diag_covs[j]).sum(axis=1)
        return out

    def dense(self) -> "DenseGmm":
        covs = np.zeros((self.m, self.d, self.d))
        idx = np.arange(self.d)
        covs[:, idx, idx] = self.diag_covs
        return DenseGmm(self.weights, self.centers.copy(), covs)

    def to_dict(self) -> dict:
        return {
            "kind": "diagonal",
            "weights": self.weights.tolist(),
            "centers": self.centers.tolist(),
            "diag_covs": self.diag_covs.tolist(),
        }


@dataclass(frozen=True, eq=False)
class DenseGmm:
    """Mixture with full covariances; produced only by affine transforms."""

    weights: np.ndarray
    centers: np.ndarray
    covs: np.ndarray

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def component_distances(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} features, got {X.shape[1]}")
        out = np.empty((X.shape[0], self.m))
        for j in range(self.m):
            diff = X - self.centers[j]
            try:
                L = np.linalg.cholesky(self.covs[j])
            except np.linalg.LinAlgError:
                # Singular covariance (non-invertible map): distance on the range only.
                out[:, j] = np.einsum("na,ab,nb->n", diff, np.linalg.pinv(self.covs[j]), diff)
                continue
            y = np.linalg.solve(L, diff.T)
            out[:, j] = (y * y).sum(axis=0)
        return out

    def dense(self) -> "DenseGmm":
        return self

    def to_dict(self) -> dict:
        return {
            "kind": "dense",
            "weights": self.weights.tolist(),
            "centers": self.centers.tolist(),
            "covs": self.covs.tolist(),
        }


AnyGmm = Union[GmmSpec, DenseGmm]


def spec_from_dict(obj: dict) -> AnyGmm:
    if obj.get("kind", "diagonal") == "dense":
        return DenseGmm(
            np.asarray(obj["weights"], dtype=np.float64),
            np.asarray(obj["centers"], dtype=np.float64),
            np.asarray(obj["covs"], dtype=np.float64),
        )
    return GmmSpec(obj["weights"], obj["centers"], obj["diag_covs"])


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    inflated_dims: tuple[int, ...]
    percentile: float
    source_spec: AnyGmm
    applied_maps: tuple[dict, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def inliers(self) -> np.ndarray:
        return self.features[self.labels == 0]

    @property
    def outliers(self) -> np.ndarray:
        return self.features[self.labels == 1]


def sample_gmm_spec(max_dims: int, max_clusters: int, rng: np.random.Generator) -> GmmSpec:
    """Draw a random hypothesis: ``d ~ U{1..D}``, ``m ~ U{1..M}``, uniform weights."""
    if max_dims < 1 or max_clusters < 1:
        raise ValueError("max_dims and max_clusters must be >= 1")
    d = int(rng.integers(1, max_dims + 1))
    m = int(rng.integers(1, max_clusters + 1))
    centers = rng.uniform(*CENTER_RANGE, size=(m, d))
    # uniform() samples [low, high); flipping gives the half-open (low, high].
    lo, hi = VARIANCE_RANGE
    variances = hi - rng.uniform(0.0, hi - lo, size=(m, d))
    return GmmSpec(np.full(m, 1.0 / m), centers, variances)


def mahalanobis_sq(x, center, diag_cov) -> float:
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    diag_cov = np.asarray(diag_cov, dtype=np.float64)
    if not (x.shape == center.shape == diag_cov.shape) or x.ndim != 1:
        raise ValueError(f"shape mismatch: {x.shape}, {center.shape}, {diag_cov.shape}")
    if np.any(diag_cov <= 0):
        raise ValueError("variances must be positive")
    return float((((x - center) ** 2) / diag_cov).sum())


def label_rows(X: np.ndarray, spec: AnyGmm, alpha: float) -> np.ndarray:
    """Vectorized labeling: 1 where every component distance exceeds the threshold."""
    threshold = chi2_quantile(spec.d, alpha)
    return np.all(spec.component_distances(X) > threshold, axis=1).astype(np.int8)


def label_against_gmm(x, spec: AnyGmm, alpha: float) -> str:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.d:
        raise ValueError(f"expected a length-{spec.d} vector, got shape {x.shape}")
    return "outlier" if label_rows(x[None, :], spec, alpha)[0] else "inlier"


def inflate_spec(spec: GmmSpec, dims, factor: float = INFLATION_FACTOR) -> GmmSpec:
    dims = np.asarray(sorted(set(int(k) for k in dims)), dtype=np.int64)
    if dims.size == 0:
        raise ValueError("inflated dimension set must be nonempty")
    if dims.min() < 0 or dims.max() >= spec.d:
        raise ValueError(f"inflated dims out of range for d={spec.d}: {dims.tolist()}")
    if factor <= 1:
        raise ValueError("inflation factor must exceed 1")
    covs = spec.diag_covs.copy()
    covs[:, dims] *= factor
    return GmmSpec(spec.weights, spec.centers, covs)


def sample_from_spec(spec: GmmSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(spec.m, size=size, p=spec.weights)
    noise = rng.standard_normal((size, spec.d))
    return spec.centers[comp] + np.sqrt(spec.diag_covs[comp]) * noise


def _rejection_sample(draw_from: GmmSpec, label_spec: GmmSpec, alpha: float, want: int,
                      target_label: int, rng: np.random.Generator) -> np.ndarray:
    budget = REJECTION_BUDGET * want
    accepted: list[np.ndarray] = []
    have = attempts = 0
    rate = 0.5
    while have < want:
        if attempts >= budget:
            raise SynthesisError(
                f"rejection budget exhausted: {have}/{want} accepted after {attempts} draws"
            )
        need = want - have
        batch = int(min(budget - attempts, max(64, 1.2 * need / max(rate, 1e-3))))
        X = sample_from_spec(draw_from, batch, rng)
        keep = X[label_rows(X, label_spec, alpha) == target_label]
        attempts += batch
        accepted.append(keep[:need])
        have += min(len(keep), need)
        rate = max(have / attempts, 1e-3)
    return np.concatenate(accepted, axis=0)


def synthesize_dataset(spec: GmmSpec, samples_per_class: int, alpha: float,
                       rng: np.random.Generator, shuffle: bool = True) -> LabeledDataset:
    """Draw ``S`` inliers from ``spec`` and ``S`` subspace outliers from a
    variance-inflated copy, both labeled against the original mixture."""
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    S = int(samples_per_class)
    k = int(rng.integers(1, spec.d + 1))
    dims = tuple(int(i) for i in np.sort(rng.choice(spec.d, size=k, replace=False)))
    inflated = inflate_spec(spec, dims)

    X_in = _rejection_sample(spec, spec, alpha, S, 0, rng)
    X_out = _rejection_sample(inflated, spec, alpha, S, 1, rng)
    X = np.concatenate([X_in, X_out], axis=0)
    y = np.concatenate([np.zeros(S, np.int8), np.ones(S, np.int8)])
    if shuffle:
        perm = rng.permutation(2 * S)
        X, y = X[perm], y[perm]
    return LabeledDataset(X, y, dims, float(alpha), spec)


def draw_prior_dataset(max_dims: int, max_clusters: int, samples_per_class: int, alpha: float,
                       rng_for_attempt: Callable[[int], np.random.Generator],
                       attempts: int = SYNTHESIS_ATTEMPTS, shuffle: bool = True) -> LabeledDataset:
    """Sample a hypothesis and synthesize from it, redrawing on :class:`SynthesisError`.

    ``rng_for_attempt(k)`` supplies the stream for attempt ``k``.
    """
    last: SynthesisError | None = None
    for attempt in range(attempts):
        rng = rng_for_attempt(attempt)
        spec = sample_gmm_spec(max_dims, max_clusters, rng)
        try:
            return synthesize_dataset(spec, samples_per_class, alpha, rng, shuffle=shuffle)
        except SynthesisError as exc:
            last = exc
    raise SynthesisError(f"synthesis failed {attempts} times; last error: {last}")


def with_features(ds: LabeledDataset, features: np.ndarray, spec: AnyGmm, record: dict) -> LabeledDataset:
    return replace(ds, features=features, source_spec=spec,
                   applied_maps=ds.applied_maps + (record,))
