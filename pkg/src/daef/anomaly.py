"""Reconstruction-error anomaly detection and the cross-validated F1 protocol."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from daef.data import LabeledDataset, scaler_apply, scaler_fit, split_folds
from daef.errors import InsufficientAnomalies, LengthMismatch, NoPositives
from daef.model import Architecture, DaefModel, predict, train
from daef.threshold import (  # noqa: F401  (re-exported)
    FittedThreshold,
    ThresholdSpec,
    classify,
    fit_threshold,
    quantile,
)


def reconstruction_errors(model: DaefModel, x: np.ndarray) -> np.ndarray:
    """Per-sample mean squared difference between input and reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    return np.mean((x - predict(model, x)) ** 2, axis=0)


def confusion(predicted: np.ndarray, truth: np.ndarray) -> dict[str, int]:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise LengthMismatch(f"predicted {predicted.shape} vs truth {truth.shape}")
    return {
        "tp": int(np.sum(predicted & truth)),
        "fp": int(np.sum(predicted & ~truth)),
        "fn": int(np.sum(~predicted & truth)),
        "tn": int(np.sum(~predicted & ~truth)),
    }


def f1_score(predicted: np.ndarray, truth: np.ndarray) -> float:
    """F1 of the anomaly class; 0 when nothing is correctly flagged."""
    c = confusion(predicted, truth)
    if c["tp"] + c["fn"] == 0:
        raise NoPositives("truth contains no anomalies")
    if c["tp"] == 0:
        return 0.0
    return 2 * c["tp"] / (2 * c["tp"] + c["fp"] + c["fn"])


@dataclass
class FoldResult:
    fold: int
    f1: float
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_train: int
    model_sha256: str


@dataclass
class EvalReport:
    dataset: str
    folds: list[FoldResult]
    config_fingerprint: str
    mean_f1: float = field(init=False)
    std_f1: float = field(init=False)

    def __post_init__(self) -> None:
        scores = np.array([f.f1 for f in self.folds])
        self.mean_f1 = float(scores.mean())
        self.std_f1 = float(scores.std())

    @property
    def thresholds(self) -> list[float]:
        return [f.threshold for f in self.folds]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "folds": [asdict(f) for f in self.folds],
            "mean_f1": self.mean_f1,
            "std_f1": self.std_f1,
            "thresholds": self.thresholds,
            "config_fingerprint": self.config_fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table_row(self) -> str:
        """``name  mean±std`` in percent, the layout of the published results table."""
        return f"{self.dataset:<12} {100 * self.mean_f1:.1f}±{100 * self.std_f1:.1f}"


def config_fingerprint(ds: LabeledDataset, arch: Architecture, spec: ThresholdSpec,
                       folds: int, rng_seed: int) -> str:
    doc = {
        "dataset": ds.name,
        "n": ds.n,
        "dim": ds.dim,
        "anomalies": ds.n_anomalies,
        "architecture": arch.to_dict(),
        "threshold": spec.to_dict(),
        "folds": folds,
        "seed": rng_seed,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def fit_detector(x_train: np.ndarray, arch: Architecture, spec: ThresholdSpec,
                 partitions: int = 1, workers: int = 1) -> DaefModel:
    """Scale, train and attach a threshold fitted on the training errors."""
    scaler = scaler_fit(x_train)
    scaled = scaler_apply(scaler, x_train)
    model = train(scaled, arch, partitions=partitions, workers=workers)
    mu = fit_threshold(reconstruction_errors(model, scaled), spec)
    model.scaler = scaler
    model.threshold = FittedThreshold(spec, mu)
    return model


def score(model: DaefModel, x: np.ndarray) -> np.ndarray:
    """Reconstruction errors of raw (unscaled) samples."""
    if model.scaler is not None:
        x = scaler_apply(model.scaler, x)
    return reconstruction_errors(model, x)


def _balanced_test(rng, anomalies: np.ndarray, normals: np.ndarray) -> np.ndarray:
    # equal class counts; normals are subsampled, anomalies only if normals run short
    k = min(anomalies.size, normals.size)
    if anomalies.size > k:
        anomalies = np.sort(rng.choice(anomalies, k, replace=False))
    normals = np.sort(rng.choice(normals, k, replace=False))
    return np.concatenate([anomalies, normals])


def evaluate_fold(ds: LabeledDataset, assignment: np.ndarray, fold: int, arch: Architecture,
                  spec: ThresholdSpec, rng_seed: int, partitions: int = 1,
                  workers: int = 1) -> FoldResult:
    in_fold = assignment == fold
    fold_anomalies = np.flatnonzero(in_fold & ds.labels)
    if fold_anomalies.size == 0:
        raise InsufficientAnomalies(f"fold {fold} received no anomalies")
    train_idx = np.flatnonzero(~in_fold & ~ds.labels)
    rng = np.random.default_rng([rng_seed, fold])
    test_idx = _balanced_test(rng, fold_anomalies, np.flatnonzero(in_fold & ~ds.labels))

    model = fit_detector(ds.features[:, train_idx], arch, spec, partitions, workers)
    flags = classify(score(model, ds.features[:, test_idx]), model.threshold.value)
    counts = confusion(flags, ds.labels[test_idx])
    return FoldResult(
        fold=fold,
        f1=f1_score(flags, ds.labels[test_idx]),
        threshold=model.threshold.value,
        n_train=int(train_idx.size),
        model_sha256=model.fingerprint(),
        **counts,
    )


def evaluate_cv(
    dataset: LabeledDataset,
    arch: Architecture,
    spec: ThresholdSpec,
    folds: int = 10,
    rng_seed: int = 0,
    workers: int = 1,
    partitions: int = 1,
) -> EvalReport:
    """Stratified k-fold protocol: train on the fold's training normals only,
    test on the fold's anomalies plus as many held-out normals."""
    if dataset.n_anomalies == 0:
        raise InsufficientAnomalies("dataset has no anomalies")
    assignment = split_folds(dataset.labels, folds, rng_seed)

    def run(k: int) -> FoldResult:
        return evaluate_fold(dataset, assignment, k, arch, spec, rng_seed, partitions)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(folds)))
    else:
        results = [run(k) for k in range(folds)]
    return EvalReport(
        dataset=dataset.name,
        folds=results,
        config_fingerprint=config_fingerprint(dataset, arch, spec, folds, rng_seed),
    )
