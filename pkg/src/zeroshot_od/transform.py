"""Label-preserving affine maps ``x -> W x + b`` for cheap dataset reuse.

``W = U diag(lam) U^T`` with ``U`` orthonormal and ``|lam|`` in ``[0.1, 1]``,
so ``W`` is symmetric and well conditioned.  An invertible affine map keeps
every per-component Mahalanobis distance (and hence every label) intact when
the mixture parameters are transformed alongside the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prior import AnyGmm, DenseGmm, LabeledDataset, label_rows, with_features

EIGEN_FLOOR = 0.1
MODES = ("subspace", "full")


@dataclass(frozen=True, eq=False)
class LinearMap:
    W: np.ndarray
    b: np.ndarray
    eigen_floor: float = EIGEN_FLOOR

    def __post_init__(self):
        W, b = np.asarray(self.W, dtype=np.float64), np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or b.shape != (W.shape[0],):
            raise ValueError(f"need a square W and matching b, got {W.shape} and {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("map entries must be finite")
        if np.linalg.cond(W) > 1e12:
            raise ValueError("map is singular")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "b": self.b.tolist(), "eigen_floor": self.eigen_floor}

    @classmethod
    def from_dict(cls, obj: dict) -> "LinearMap":
        return cls(np.asarray(obj["W"], dtype=np.float64), np.asarray(obj["b"], dtype=np.float64),
                   float(obj.get("eigen_floor", EIGEN_FLOOR)))


def random_orthonormal(k: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((k, k)))
    # Sign-fix so R has a positive diagonal; makes U a deterministic function of the draw.
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def sample_linear_map(dim: int, rng: np.random.Generator, eigen_floor: float = EIGEN_FLOOR) -> LinearMap:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    U = random_orthonormal(dim, rng)
    mags = rng.uniform(eigen_floor, 1.0, size=dim)
    lam = mags * rng.choice([-1.0, 1.0], size=dim)
    W = (U * lam) @ U.T
    W = 0.5 * (W + W.T)
    b = rng.uniform(-1.0, 1.0, size=dim)
    return LinearMap(W, b, eigen_floor)


def _target_dims(ds: LabeledDataset, mode: str) -> np.ndarray:
    if mode == "subspace":
        return np.asarray(ds.inflated_dims, dtype=np.int64)
    if mode == "full":
        return np.arange(ds.d)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def transform_spec(spec: AnyGmm, lmap: LinearMap, dims: np.ndarray) -> DenseGmm:
    """Push mixture parameters through the map acting on ``dims``."""
    dense = spec.dense()
    centers = dense.centers.copy()
    centers[:, dims] = centers[:, dims] @ lmap.W.T + lmap.b
    covs = dense.covs.copy()
    covs[:, dims, :] = np.einsum("ab,mbc->mac", lmap.W, covs[:, dims, :])
    covs[:, :, dims] = np.einsum("mab,cb->mac", covs[:, :, dims], lmap.W)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return DenseGmm(dense.weights, centers, covs)


def apply_map(ds: LabeledDataset, lmap: LinearMap, mode: str = "subspace") -> LabeledDataset:
    dims = _target_dims(ds, mode)
    if lmap.dim != dims.size:
        raise ValueError(f"map has dim {lmap.dim} but mode {mode!r} selects {dims.size} features")
    X = ds.features.copy()
    if mode == "full":
        X = X @ lmap.W.T + lmap.b
    else:
        X[:, dims] = X[:, dims] @ lmap.W.T + lmap.b
    record = {"mode": mode, "dims": dims.tolist(), **lmap.to_dict()}
    return with_features(ds, X, transform_spec(ds.source_spec, lmap, dims), record)


def preservation_report(before: LabeledDataset, after: LabeledDataset) -> dict:
    """Per-component distance drift and label flips between a dataset and its image."""
    d_before = before.source_spec.component_distances(before.features)
    d_after = after.source_spec.component_distances(after.features)
    relabeled = label_rows(after.features, after.source_spec, before.percentile)
    return {
        "max_distance_drift": float(np.max(np.abs(d_before - d_after))),
        "label_flips": int(np.sum(relabeled != before.labels)),
    }


def verify_preservation(ds: LabeledDataset, lmap: LinearMap, mode: str = "subspace") -> dict:
    """Apply ``lmap`` and compare per-component squared distances and labels."""
    return preservation_report(ds, apply_map(ds, lmap, mode))
