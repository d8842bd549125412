import numpy as np
import pytest

from zeroshot_od.dataio import (DataFormatError, read_dataset, read_scores, read_table,
                                sidecar_path, write_dataset, write_scores)
from zeroshot_od.prior import draw_prior_dataset
from zeroshot_od.rng import derive_rng
from zeroshot_od.transform import apply_map, sample_linear_map


def test_dataset_roundtrip(tmp_path):
    ds = draw_prior_dataset(4, 2, 30, 0.9, lambda a: derive_rng(0, "d", a))
    ds = apply_map(ds, sample_linear_map(ds.d, np.random.default_rng(1)), "full")
    path = write_dataset(ds, tmp_path / "x.csv")
    assert sidecar_path(path).name == "x.meta.json"
    back = read_dataset(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert back.inflated_dims == ds.inflated_dims
    assert back.applied_maps[0]["mode"] == "full"
    assert np.allclose(back.source_spec.covs, ds.source_spec.covs)


def test_table_without_label(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1,2\n3,4.5\n")
    X, y = read_table(p)
    assert y is None and np.array_equal(X, [[1, 2], [3, 4.5]])
    with pytest.raises(DataFormatError, match="label"):
        read_table(p, require_label=True)


def test_malformed_float_names_row(tmp_path):
    p = tmp_path / "bad.csv"
    rows = ["1.0,2.0"] * 6 + ["1.0,abc"]
    p.write_text("a,b\n" + "\n".join(rows) + "\n")
    with pytest.raises(DataFormatError, match="row 7"):
        read_table(p)


@pytest.mark.parametrize("body,match", [("1,2,7\n", "label must be"), ("nan,1,0\n", "non-finite"),
                                        ("1,2\n", "fields")])
def test_format_errors(tmp_path, body, match):
    p = tmp_path / "e.csv"
    p.write_text("a,b,label\n" + body)
    with pytest.raises(DataFormatError, match=match):
        read_table(p)


def test_fields_error(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("a,b\n1,2,3\n")
    with pytest.raises(DataFormatError, match="row 1"):
        read_table(p)


def test_scores_roundtrip(tmp_path):
    s = np.random.default_rng(0).random(10)
    write_scores(s, tmp_path / "s.csv")
    assert np.array_equal(read_scores(tmp_path / "s.csv"), s)
    (tmp_path / "b.csv").write_text("row_index,p_outlier\n0,0.5\n2,0.1\n")
    with pytest.raises(DataFormatError):
        read_scores(tmp_path / "b.csv")
