"""Dataset ingestion, standard scaling and index splitting.

Features are stored one sample per column, ``(m0, n)``, matching the model.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from daef.errors import (
    InsufficientAnomalies,
    MissingLabelColumn,
    NonNumericFeature,
    ParseError,
    TooFewSamples,
    TooManyPartitions,
)

DEGENERATE_STD = 1e-12


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    manifest: dict | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[1],):
            raise ValueError(
                f"labels {self.labels.shape} do not match features {self.features.shape}"
            )
        if self.labels.all():
            raise ValueError("dataset has no normal samples")

    @property
    def n(self) -> int:
        return int(self.features.shape[1])

    @property
    def dim(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_anomalies(self) -> int:
        return int(self.labels.sum())

    def normals(self) -> np.ndarray:
        return self.features[:, ~self.labels]

    def subset(self, index: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[:, index], self.labels[index], self.name, self.manifest)


# -- CSV --------------------------------------------------------------------


def load_csv(
    path: str | Path,
    label_column: str | int | None = None,
    anomaly_value: str = "1",
    name: str | None = None,
    drop_columns: tuple[str, ...] = (),
) -> LabeledDataset:
    """Read a headed CSV; every column except the label column is a feature.

    Without a label column all samples are treated as normal.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=0) from None
        header = [h.strip() for h in header]
        label_idx = _label_index(header, label_column)

        missing = [c for c in drop_columns if c not in header]
        if missing:
            raise ParseError(f"{path}: columns to drop not in header: {missing}", row=1)
        columns = [i for i, h in enumerate(header) if i != label_idx and h not in drop_columns]
        rows, labels = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}",
                    row=lineno,
                )
            values = []
            for i in columns:
                cell = record[i].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise NonNumericFeature(
                        f"{path}:{lineno}: column {header[i]!r} holds non-numeric value {cell!r}",
                        row=lineno,
                        col=i,
                    ) from None
            rows.append(values)
            if label_idx is not None:
                labels.append(record[label_idx].strip() == str(anomaly_value))
    if not rows:
        raise ParseError(f"{path}: no data rows", row=1)
    features = np.array(rows, dtype=np.float64).T
    if not np.all(np.isfinite(features)):
        raise NonNumericFeature(f"{path}: non-finite feature values")
    y = np.array(labels, dtype=bool) if label_idx is not None else np.zeros(len(rows), bool)
    return LabeledDataset(features, y, name or path.stem)


def _label_index(header: list[str], label_column) -> int | None:
    if label_column is None:
        return None
    if isinstance(label_column, int):
        if not -len(header) <= label_column < len(header):
            raise MissingLabelColumn(f"label column index {label_column} out of range")
        return label_column % len(header)
    if label_column not in header:
        raise MissingLabelColumn(f"label column {label_column!r} not in header {header}")
    return header.index(label_column)


def write_csv(path: str | Path, ds: LabeledDataset, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.dim)] + [label_column])
        for j in range(ds.n):
            w.writerow([repr(float(v)) for v in ds.features[:, j]] + [int(ds.labels[j])])


def convert_mat(mat_path: str | Path, csv_path: str | Path) -> LabeledDataset:
    """Convert an ODDS-style ``.mat`` file (``X``: n x d, ``y``: n x 1) to CSV."""
    from scipy.io import loadmat

    mat = loadmat(str(mat_path))
    ds = LabeledDataset(
        np.asarray(mat["X"], dtype=np.float64).T,
        np.asarray(mat["y"]).ravel() != 0,
        Path(mat_path).stem,
    )
    write_csv(csv_path, ds)
    return ds


# -- manifests --------------------------------------------------------------


def manifest_names() -> list[str]:
    root = resources.files("daef.resources") / "manifests"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_manifest(name_or_path: str | Path) -> dict:
    """Read a manifest by file path or by bundled name (``"ionosphere"``)."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc.setdefault("_base", str(path.parent))
        return doc
    ref = resources.files("daef.resources") / "manifests" / f"{name_or_path}.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no manifest file or bundled manifest named {name_or_path!r}")
    return json.loads(ref.read_text(encoding="utf-8"))


DATA_DIR_ENV = "DAEF_DATA_DIR"


def bundled_data(file_name: str) -> Path | None:
    """Locate a dataset file: ``$DAEF_DATA_DIR`` first, then the bundled copies."""
    if not file_name:
        return None
    local = os.environ.get(DATA_DIR_ENV)
    if local and (Path(local) / file_name).is_file():
        return Path(local) / file_name
    ref = resources.files("daef.resources") / "data" / file_name
    return Path(str(ref)) if ref.is_file() else None


def load_dataset(manifest: dict | str | Path, csv_path: str | Path | None = None) -> LabeledDataset:
    """Load the CSV described by ``manifest`` and compare counts with it.

    A count mismatch only warns: public mirrors of these datasets drift.
    """
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    if csv_path is None:
        csv_path = bundled_data(manifest.get("file", ""))
        if csv_path is None:
            raise FileNotFoundError(
                f"dataset {manifest['name']!r} is not bundled; pass the CSV path explicitly "
                f"or place {manifest.get('file')!r} in ${DATA_DIR_ENV}"
            )
    ds = load_csv(
        csv_path,
        manifest.get("label_column"),
        manifest.get("anomaly_value", "1"),
        name=manifest["name"],
        drop_columns=tuple(manifest.get("drop_columns", ())),
    )
    ds.manifest = manifest
    drop = manifest.get("drop_constant_features", False)
    if drop:
        keep = ds.features.std(axis=1) > 0
        ds.features = ds.features[keep]
    expected = manifest.get("expected", {})
    actual = {"n": ds.n, "dim": ds.dim, "anomalies": ds.n_anomalies}
    diff = {k: (expected[k], actual[k]) for k in actual if k in expected and expected[k] != actual[k]}
    if diff:
        warnings.warn(f"{manifest['name']}: counts differ from manifest (expected, actual): {diff}")
    return ds


# -- scaling ----------------------------------------------------------------


@dataclass(frozen=True)
class StandardScaler:
    means: np.ndarray
    stds: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        return scaler_apply(self, features)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "StandardScaler":
        return cls(np.asarray(doc["means"], dtype=np.float64), np.asarray(doc["stds"], dtype=np.float64))


def scaler_fit(features: np.ndarray) -> StandardScaler:
    """Per-feature mean and population std; constant features keep std 1."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] < 2:
        raise TooFewSamples("need at least 2 samples to fit a scaler")
    means = features.mean(axis=1)
    stds = features.std(axis=1)
    stds = np.where(stds < DEGENERATE_STD, 1.0, stds)
    return StandardScaler(means, stds)


def scaler_apply(s: StandardScaler, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != s.means.shape[0]:
        raise ValueError(f"scaler fitted on {s.means.shape[0]} features, got {features.shape[0]}")
    return (features - s.means[:, None]) / s.stds[:, None]


# -- splitting --------------------------------------------------------------


def split_folds(labels: np.ndarray, folds: int, rng_seed: int) -> np.ndarray:
    """Fold id for every sample, stratified by label.

    Anomalies are dealt round-robin first, normals continue the same rotation,
    so fold sizes and per-fold anomaly counts each differ by at most one.
    """
    labels = np.asarray(labels, dtype=bool)
    n = labels.shape[0]
    if folds < 2 or folds > n:
        raise ValueError(f"folds must lie in [2, {n}], got {folds}")
    if labels.sum() < folds:
        raise InsufficientAnomalies(f"{int(labels.sum())} anomalies cannot fill {folds} folds")
    rng = np.random.default_rng(rng_seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels)),
                            rng.permutation(np.flatnonzero(~labels))])
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % folds
    return assignment


def partition_indices(n: int, p: int, rng_seed: int) -> list[np.ndarray]:
    if p < 1 or p > n:
        raise TooManyPartitions(f"cannot split {n} columns into {p} non-empty partitions")
    perm = np.random.default_rng(rng_seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, p)]


def partition_columns(x: np.ndarray, p: int, rng_seed: int) -> list[np.ndarray]:
    """Disjoint column blocks of near-equal size (sizes differ by at most one)."""
    x = np.asarray(x)
    return [x[:, idx] for idx in partition_indices(x.shape[1], p, rng_seed)]
