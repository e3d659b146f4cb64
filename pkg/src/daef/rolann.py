"""Closed-form regularized training of a single layer of neurons.

Each output neuron is fitted independently by minimizing the squared error
measured before its activation function, plus an L2 penalty. The sufficient
statistics of that fit (``m``, ``u``, ``s``) add up exactly across data
chunks, which is what makes incremental and federated training possible.

Layer inputs have shape ``(m_in, n)``; a constant row of ones is appended so
that the last component of every solved weight vector is the bias.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from daef.errors import DomainError, NonFiniteInput, ShapeMismatch, SingularSystem, with_context
from daef.linalg import SvdThin, dsvd_merge, svd_thin

DEFAULT_CLAMP_EPS = 1e-3
SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class Activation:
    """A neural function together with its derivative and inverse.

    ``bounds`` is the open output range, or ``None`` when unbounded.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    bounds: tuple[float, float] | None

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.value(z)

    def clamp(self, y: np.ndarray, eps: float) -> np.ndarray:
        if self.bounds is None:
            return y
        lo, hi = self.bounds
        return np.clip(y, lo + eps, hi - eps)


def _sigmoid_derivative(z):
    fz = special.expit(z)
    return fz * (1.0 - fz)


def _tanh_derivative(z):
    return 1.0 - np.tanh(z) ** 2


def _identity(z):
    return np.asarray(z, dtype=np.float64)


def _ones(z):
    return np.ones_like(np.asarray(z, dtype=np.float64))


SIGMOID = Activation("sigmoid", special.expit, _sigmoid_derivative, special.logit, (0.0, 1.0))
TANH = Activation("tanh", np.tanh, _tanh_derivative, np.arctanh, (-1.0, 1.0))
LINEAR = Activation("linear", _identity, _ones, _identity, None)

ACTIVATIONS = {"sigmoid": SIGMOID, "logistic": SIGMOID, "tanh": TANH, "linear": LINEAR}


def get_activation(name: str | Activation) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None


@dataclass(frozen=True)
class RolannWorkset:
    d_bar: np.ndarray
    f_prime: np.ndarray
    inputs_aug: np.ndarray


@dataclass(frozen=True)
class RolannPartial:
    """Knowledge about one output neuron gathered from some set of samples."""

    m: np.ndarray
    u: np.ndarray
    s: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if self.u.shape != (self.m.shape[0], self.s.shape[0]):
            raise ShapeMismatch(
                f"inconsistent partial: m {self.m.shape}, u {self.u.shape}, s {self.s.shape}"
            )

    @property
    def svd(self) -> SvdThin:
        return SvdThin(u=self.u, s=self.s)

    @property
    def size(self) -> int:
        """Length of the solved weight vector (inputs + bias)."""
        return int(self.m.shape[0])


def zero_partial(n_inputs: int) -> RolannPartial:
    """Partial that carries no samples; the identity element of merging."""
    return RolannPartial(
        m=np.zeros(n_inputs + 1), u=np.zeros((n_inputs + 1, 0)), s=np.zeros(0), count=0
    )


def augment(inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    return np.vstack([inputs, np.ones((1, inputs.shape[1]))])


def make_workset(
    inputs: np.ndarray,
    desired: np.ndarray,
    act: Activation | str,
    clamp_eps: float = DEFAULT_CLAMP_EPS,
) -> RolannWorkset:
    act = get_activation(act)
    inputs = np.asarray(inputs, dtype=np.float64)
    desired = np.asarray(desired, dtype=np.float64).ravel()
    if inputs.ndim != 2 or inputs.shape[1] != desired.shape[0]:
        raise ShapeMismatch(
            f"inputs {inputs.shape} do not match {desired.shape[0]} desired outputs"
        )
    if not 0.0 < clamp_eps <= 0.1:
        raise ValueError(f"clamp_eps must lie in (0, 0.1], got {clamp_eps}")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(desired))):
        raise NonFiniteInput("workset inputs contain NaN or Inf")

    with np.errstate(divide="ignore", invalid="ignore"):
        d_bar = act.inverse(act.clamp(desired, clamp_eps))
    if not np.all(np.isfinite(d_bar)):
        raise DomainError(f"{act.name} has no finite inverse for some desired outputs")
    return RolannWorkset(d_bar=d_bar, f_prime=act.derivative(d_bar), inputs_aug=augment(inputs))


def compute_partial(ws: RolannWorkset) -> RolannPartial:
    x = ws.inputs_aug
    count = int(x.shape[1])
    if count == 0:
        return zero_partial(x.shape[0] - 1)
    svd = svd_thin(x * ws.f_prime)
    m = x @ (ws.f_prime * ws.f_prime * ws.d_bar)
    return RolannPartial(m=m, u=svd.u, s=svd.s, count=count)


def merge_many(parts: Sequence[RolannPartial]) -> RolannPartial:
    """Merge any number of partials in one SVD; empty partials are skipped."""
    if not parts:
        raise ValueError("nothing to merge")
    sizes = {p.size for p in parts}
    if len(sizes) != 1:
        raise ShapeMismatch(f"partials disagree on input size: {sorted(sizes)}")
    live = [p for p in parts if p.count > 0 and p.s.size > 0]
    m = np.sum([p.m for p in parts], axis=0)
    count = sum(p.count for p in parts)
    if not live:
        return RolannPartial(m=m, u=parts[0].u[:, :0], s=np.zeros(0), count=count)
    merged = dsvd_merge([p.svd for p in live])
    return RolannPartial(m=m, u=merged.u, s=merged.s, count=count)


def merge_partials(a: RolannPartial, b: RolannPartial) -> RolannPartial:
    return merge_many([a, b])


def solve_weights(p: RolannPartial, lam: float) -> np.ndarray:
    """Regularized weights ``u diag(1/(s^2 + lam)) u^T m``; last entry is the bias."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0 and (p.s.size < p.size or np.any(p.s <= SINGULAR_TOL)):
        raise SingularSystem("lambda = 0 requires every singular value above 1e-10")
    return p.u @ ((p.u.T @ p.m) / (p.s * p.s + lam))


def _map(fn, items, workers: int) -> list:
    # results land in input order regardless of scheduling
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def layer_partials(
    inputs: np.ndarray,
    targets: np.ndarray,
    act: Activation | str,
    clamp_eps: float = DEFAULT_CLAMP_EPS,
    workers: int = 1,
) -> list[RolannPartial]:
    """One partial per target row (output neuron)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[1] != targets.shape[1]:
        raise ShapeMismatch(f"inputs {inputs.shape} vs targets {targets.shape}")

    def one(j: int) -> RolannPartial:
        try:
            return compute_partial(make_workset(inputs, targets[j], act, clamp_eps))
        except Exception as exc:
            raise with_context(exc, f"neuron {j}", neuron=j) from exc

    return _map(one, range(targets.shape[0]), workers)


def solve_layer(
    partials: Sequence[RolannPartial], lam: float, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Solve every neuron; returns ``(weights (m_in, m_out), bias (m_out,))``."""

    def one(j: int) -> np.ndarray:
        try:
            return solve_weights(partials[j], lam)
        except Exception as exc:
            raise with_context(exc, f"neuron {j}", neuron=j) from exc

    w_aug = np.column_stack(_map(one, range(len(partials)), workers))
    return w_aug[:-1, :], w_aug[-1, :].copy()


def fit_layer(
    inputs: np.ndarray,
    targets: np.ndarray,
    act: Activation | str,
    lam: float,
    workers: int = 1,
    clamp_eps: float = DEFAULT_CLAMP_EPS,
) -> tuple[np.ndarray, np.ndarray, list[RolannPartial]]:
    partials = layer_partials(inputs, targets, act, clamp_eps, workers)
    weights, bias = solve_layer(partials, lam, workers)
    return weights, bias, partials
