"""Reconstruction-error thresholds and the anomaly decision rule."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from daef.errors import TooFewSamples

KINDS = ("unusual_iqr", "extreme_iqr", "percentile", "contamination")


@dataclass(frozen=True)
class ThresholdSpec:
    """How to turn training errors into a cutoff.

    ``param`` is the quantile level for ``percentile`` and the assumed anomaly
    rate for ``contamination``; it is ``None`` for the IQR kinds.
    """

    kind: str
    param: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown threshold kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("percentile", "contamination"):
            if self.param is None or not 0.0 < self.param < 1.0:
                raise ValueError(f"{self.kind} needs a parameter in (0, 1), got {self.param}")
        elif self.param is not None:
            raise ValueError(f"{self.kind} takes no parameter")

    @classmethod
    def parse(cls, text: str) -> "ThresholdSpec":
        """Parse ``extreme_iqr``, ``unusual_iqr``, ``q90``, ``percentile:0.9``
        or ``contamination:0.05``."""
        text = text.strip().lower()
        if text in ("unusual_iqr", "extreme_iqr"):
            return cls(text)
        match = re.fullmatch(r"q(\d{1,2})", text)
        if match:
            return cls("percentile", int(match.group(1)) / 100)
        kind, _, value = text.partition(":")
        if kind in ("percentile", "contamination") and value:
            return cls(kind, float(value))
        raise ValueError(f"cannot parse threshold spec {text!r}")

    def label(self) -> str:
        return self.kind if self.param is None else f"{self.kind}:{self.param!r}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param}


@dataclass(frozen=True)
class FittedThreshold:
    spec: ThresholdSpec
    value: float

    def to_dict(self) -> dict:
        return {"kind": self.spec.kind, "param": self.spec.param, "value": self.value}

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedThreshold":
        return cls(ThresholdSpec(doc["kind"], doc.get("param")), float(doc["value"]))


def quantile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics at ``h = (n - 1) q``."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


def fit_threshold(train_errors: np.ndarray, spec: ThresholdSpec) -> float:
    errors = np.asarray(train_errors, dtype=np.float64).ravel()
    if errors.size < 4:
        raise TooFewSamples(f"need at least 4 errors to fit a threshold, got {errors.size}")
    if not np.all(np.isfinite(errors)) or np.any(errors < 0):
        raise ValueError("errors must be finite and non-negative")
    if spec.kind == "percentile":
        return quantile(errors, spec.param)
    if spec.kind == "contamination":
        return quantile(errors, 1.0 - spec.param)
    q1, q3 = quantile(errors, 0.25), quantile(errors, 0.75)
    k = 1.5 if spec.kind == "unusual_iqr" else 3.0
    return q3 + k * (q3 - q1)


def classify(errors: np.ndarray, mu: float) -> np.ndarray:
    """``True`` marks an anomaly; an error equal to ``mu`` counts as normal."""
    return np.asarray(errors, dtype=np.float64) > mu
