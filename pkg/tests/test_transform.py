import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zeroshot_od.prior import GmmSpec, draw_prior_dataset, label_rows
from zeroshot_od.rng import derive_rng
from zeroshot_od.transform import (LinearMap, apply_map, random_orthonormal, sample_linear_map,
                                   transform_spec, verify_preservation)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 25), st.integers(0, 2**31))
def test_map_spectrum(dim, seed):
    lmap = sample_linear_map(dim, np.random.default_rng(seed))
    assert np.allclose(lmap.W, lmap.W.T)
    mags = np.abs(np.linalg.eigvalsh(lmap.W))
    assert np.all(mags >= 0.1 - 1e-12) and np.all(mags <= 1 + 1e-12)
    assert np.all(np.abs(lmap.b) <= 1)


def test_orthonormal_and_deterministic():
    U = random_orthonormal(7, np.random.default_rng(1))
    assert np.allclose(U.T @ U, np.eye(7), atol=1e-12)
    assert np.array_equal(U, random_orthonormal(7, np.random.default_rng(1)))


def test_map_dict_roundtrip():
    lmap = sample_linear_map(4, np.random.default_rng(0))
    back = LinearMap.from_dict(lmap.to_dict())
    assert np.array_equal(back.W, lmap.W) and np.array_equal(back.b, lmap.b)


def test_singular_map_rejected():
    with pytest.raises(ValueError):
        LinearMap(np.zeros((2, 2)), np.zeros(2))


def test_transform_spec_closed_form():
    spec = GmmSpec(np.ones(1), np.array([[1.0, 2.0]]), np.array([[1.0, 4.0]]))
    W = np.array([[0.5, 0.0], [0.0, -0.25]])
    out = transform_spec(spec, LinearMap(W, np.array([1.0, 1.0])), np.arange(2))
    assert np.allclose(out.centers, [[1.5, 0.5]])
    assert np.allclose(out.covs[0], np.diag([0.25, 0.25]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 5), st.sampled_from(["subspace", "full"]),
       st.integers(0, 2**31))
def test_preserves_distances_and_labels(D, M, mode, seed):
    ds = draw_prior_dataset(D, M, 80, 0.9, lambda a: derive_rng(seed, "ds", a))
    dim = len(ds.inflated_dims) if mode == "subspace" else ds.d
    lmap = sample_linear_map(dim, derive_rng(seed, "map"))
    report = verify_preservation(ds, lmap, mode)
    assert report["max_distance_drift"] < 1e-6
    assert report["label_flips"] == 0


def test_subspace_mode_leaves_other_dims():
    ds = draw_prior_dataset(12, 2, 50, 0.9, lambda a: derive_rng(5, "ds", a))
    lmap = sample_linear_map(len(ds.inflated_dims), np.random.default_rng(0))
    out = apply_map(ds, lmap, "subspace")
    rest = np.setdiff1d(np.arange(ds.d), ds.inflated_dims)
    assert np.array_equal(out.features[:, rest], ds.features[:, rest])
    assert np.array_equal(out.labels, ds.labels)
    assert out.applied_maps[-1]["dims"] == list(ds.inflated_dims)


def test_composed_maps_keep_labels():
    ds = draw_prior_dataset(8, 3, 80, 0.9, lambda a: derive_rng(9, "ds", a))
    for k in range(5):
        ds = apply_map(ds, sample_linear_map(ds.d, derive_rng(9, "m", k)), "full")
    assert len(ds.applied_maps) == 5
    assert np.array_equal(label_rows(ds.features, ds.source_spec, 0.9), ds.labels)


def test_wrong_dim_rejected():
    ds = draw_prior_dataset(5, 1, 20, 0.9, lambda a: derive_rng(1, "ds", a))
    with pytest.raises(ValueError):
        apply_map(ds, sample_linear_map(ds.d + 1, np.random.default_rng(0)), "full")
    with pytest.raises(ValueError):
        apply_map(ds, sample_linear_map(ds.d, np.random.default_rng(0)), "diagonal")
