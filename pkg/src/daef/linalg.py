"""Thin SVD primitives that never expose right singular vectors.

Matrices follow the column-per-sample layout used throughout the package:
a data block ``x`` has shape ``(features, samples)``. Only the left factor
``u`` and the singular values ``s`` ever leave this module, so a block of
data cannot be rebuilt from what is returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from daef.errors import EmptyInput, NonFiniteInput, RankOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class SvdThin:
    """Left singular vectors ``u`` (columns) and singular values ``s``.

    Singular values below ``1e-12 * s[0]`` are kept as they are; they are
    numerically null but the truncation rank is always chosen by the caller.
    """

    u: np.ndarray
    s: np.ndarray

    def __post_init__(self) -> None:
        if self.u.ndim != 2 or self.s.ndim != 1:
            raise ShapeMismatch("u must be 2-D and s 1-D")
        if self.u.shape[1] != self.s.shape[0]:
            raise ShapeMismatch(
                f"u has {self.u.shape[1]} columns but s has {self.s.shape[0]} values"
            )

    @property
    def rank(self) -> int:
        return int(self.s.shape[0])

    @property
    def rows(self) -> int:
        return int(self.u.shape[0])

    def scaled(self) -> np.ndarray:
        """Return ``u @ diag(s)``, the only product shared between sites."""
        return self.u * self.s


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise EmptyInput(f"matrix must have at least one row and column, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    return x


def canonical_sign(svd: SvdThin) -> SvdThin:
    """Flip columns of ``u`` so each column's largest-magnitude entry is positive.

    Ties in magnitude resolve to the lowest row index. Idempotent.
    """
    u = svd.u
    if u.shape[1] == 0:
        return svd
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdThin(u=u * signs, s=svd.s)


def svd_thin(x: np.ndarray) -> SvdThin:
    """Thin SVD of ``x`` keeping ``r = min(rows, cols)`` components.

    ``x`` is first reduced to its triangular QR factor so the
    sample-dimension orthogonal factor is never formed; the small SVD of that
    factor yields the same ``u`` and ``s`` as a direct SVD of ``x``.
    """
    x = _as_matrix(x)
    r_factor = np.linalg.qr(x.T, mode="r")
    u, s, _ = np.linalg.svd(r_factor.T, full_matrices=False)
    return canonical_sign(SvdThin(u=u, s=s))


def truncate(svd: SvdThin, rank: int) -> SvdThin:
    if rank < 1 or rank > svd.rank:
        raise RankOutOfRange(f"rank {rank} outside [1, {svd.rank}]")
    return SvdThin(u=svd.u[:, :rank].copy(), s=svd.s[:rank].copy())


def dsvd_merge(parts: Sequence[SvdThin]) -> SvdThin:
    """Merge per-block factorizations into the factorization of the joined data.

    Concatenates ``u_p @ diag(s_p)`` for every part and takes one more thin
    SVD. Parts may have different widths but must agree on the row count.
    """
    if len(parts) == 0:
        raise EmptyInput("dsvd_merge needs at least one part")
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeMismatch(f"parts disagree on row count: {sorted(rows)}")
    blocks = [p.scaled() for p in parts if p.rank > 0]
    if not blocks:
        raise EmptyInput("all parts are empty")
    return svd_thin(np.hstack(blocks))
