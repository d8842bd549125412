"""Shared on-disk formats: dataset CSV + JSON sidecar, score CSV."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .prior import LabeledDataset, spec_from_dict


class DataFormatError(ValueError):
    pass


def sidecar_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_csv(features: np.ndarray, labels: np.ndarray | None) -> str:
    d = features.shape[1]
    buf = io.StringIO()
    header = [f"f{k}" for k in range(d)] + (["label"] if labels is not None else [])
    buf.write(",".join(header) + "\n")
    for i, row in enumerate(features):
        cells = [_fmt(v) for v in row]
        if labels is not None:
            cells.append(str(int(labels[i])))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_dataset(ds: LabeledDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dataset_csv(ds.features, ds.labels), encoding="utf-8")
    meta = {
        "percentile": ds.percentile,
        "inflated_dims": list(ds.inflated_dims),
        "source_spec": ds.source_spec.to_dict(),
        "applied_maps": list(ds.applied_maps),
    }
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_table(path, require_label: bool = False):
    """Parse a dataset CSV; returns ``(features, labels_or_None)``.

    Rows are counted from 1 after the header, and errors name the row.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        has_label = bool(header) and header[-1] == "label"
        if require_label and not has_label:
            raise DataFormatError(f"{path}: missing 'label' column")
        n_feat = len(header) - int(has_label)
        if n_feat < 1:
            raise DataFormatError(f"{path}: no feature columns")
        rows, labels = [], []
        for rowno, cells in enumerate(reader, start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise DataFormatError(
                    f"{path}: row {rowno} has {len(cells)} fields, expected {len(header)}")
            try:
                rows.append([float(c) for c in cells[:n_feat]])
            except ValueError:
                bad = next(c for c in cells[:n_feat] if not _is_float(c))
                raise DataFormatError(f"{path}: row {rowno}: malformed float {bad!r}") from None
            if has_label:
                lab = cells[-1].strip()
                if lab not in ("0", "1"):
                    raise DataFormatError(f"{path}: row {rowno}: label must be 0 or 1, got {lab!r}")
                labels.append(int(lab))
    X = np.asarray(rows, dtype=np.float64).reshape(-1, n_feat)
    if not np.all(np.isfinite(X)):
        raise DataFormatError(f"{path}: non-finite feature values")
    return X, (np.asarray(labels, dtype=np.int8) if has_label else None)


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def read_dataset(path) -> LabeledDataset:
    """Read a CSV plus its sidecar back into a :class:`LabeledDataset`."""
    X, y = read_table(path, require_label=True)
    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"missing sidecar {meta_path}") from None
    return LabeledDataset(X, y, tuple(meta["inflated_dims"]), float(meta["percentile"]),
                          spec_from_dict(meta["source_spec"]), tuple(meta.get("applied_maps", ())))


def write_scores(scores: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["row_index,p_outlier"] + [f"{i},{_fmt(s)}" for i, s in enumerate(scores)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_scores(path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row_index", "p_outlier"]:
            raise DataFormatError(f"{path}: expected header 'row_index,p_outlier'")
        out = {}
        for rowno, cells in enumerate(reader, start=1):
            if not cells:
                continue
            try:
                out[int(cells[0])] = float(cells[1])
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}: row {rowno}: malformed score line") from None
    if sorted(out) != list(range(len(out))):
        raise DataFormatError(f"{path}: row indices are not 0..n-1")
    return np.array([out[i] for i in range(len(out))])
