"""
Dense symmetric linear algebra used throughout the package.

Every square root here goes through a symmetric eigendecomposition, so
``spd_sqrt(A)`` is the symmetric root and products of roots stay symmetric.
Inputs are symmetrized as ``(A + A.T) / 2`` after a tolerance check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import (
    DimensionMismatch,
    IndefiniteInput,
    NotSymmetric,
    ZeroBasis,
    ZeroMatrix,
)

DEFAULT_SYMMETRY_TOL = 1e-8
DEFAULT_EIGEN_FLOOR = 1e-12
INDEFINITE_TOL = 1e-8

Array = NDArray[np.float64]


def as_symmetric(a: ArrayLike, symmetry_tol: float = DEFAULT_SYMMETRY_TOL) -> Array:
    """Validate squareness and symmetry of `a` and return ``(a + a.T) / 2``.

    The symmetry check is relative: ``||a - a.T||_F <= symmetry_tol * ||a||_F``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise DimensionMismatch("matrix dimension must be at least 1")
    if not np.all(np.isfinite(a)):
        raise NotSymmetric("matrix contains non-finite entries")
    scale = np.linalg.norm(a)
    asym = np.linalg.norm(a - a.T)
    if asym > symmetry_tol * max(scale, np.finfo(float).tiny):
        raise NotSymmetric(
            f"matrix is not symmetric: ||A - A^T||_F = {asym:.3e} vs ||A||_F = {scale:.3e}"
        )
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SpectralDecomp:
    """Eigenvalues in ascending order with orthonormal eigenvector columns."""

    eigenvalues: Array
    eigenvectors: Array

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    def apply(self, fn) -> Array:
        """Return ``Q diag(fn(w)) Q^T``."""
        q = self.eigenvectors
        return (q * fn(self.eigenvalues)) @ q.T

    def reconstruct(self) -> Array:
        return self.apply(lambda w: w)


def spectral_decomp(a: ArrayLike, symmetry_tol: float = DEFAULT_SYMMETRY_TOL) -> SpectralDecomp:
    w, q = np.linalg.eigh(as_symmetric(a, symmetry_tol))
    return SpectralDecomp(w, q)


def check_psd(dec: SpectralDecomp) -> None:
    norm2 = dec.lambda_max
    if dec.eigenvalues[0] < -INDEFINITE_TOL * norm2:
        raise IndefiniteInput(
            f"matrix is indefinite: min eigenvalue {dec.eigenvalues[0]:.3e}, "
            f"||A||_2 = {norm2:.3e}"
        )


def spd_sqrt(a: ArrayLike, floor: float = 0.0, cutoff: float = 0.0) -> Array:
    """Symmetric PSD square root of a PSD matrix.

    Eigenvalues at or below ``cutoff * lambda_max`` are first set to zero
    (this removes round-off eigenvalues that the square root would otherwise
    amplify to ``sqrt(eps)``), then everything is clamped below at the absolute
    value `floor`.
    """
    if floor < 0:
        raise ValueError("floor must be non-negative")
    dec = spectral_decomp(a)
    check_psd(dec)
    return _sqrt_from(dec, floor, cutoff)


def _sqrt_from(dec: SpectralDecomp, floor: float, cutoff: float) -> Array:
    w = dec.eigenvalues
    w = np.where(w <= cutoff * dec.lambda_max, 0.0, w)
    w = np.maximum(w, floor)
    return dec.apply(lambda _: np.sqrt(w))


def floored_eigenvalues(dec: SpectralDecomp, eigen_floor: float) -> Array:
    lam_max = dec.eigenvalues[-1]
    if lam_max <= 0.0:
        raise ZeroMatrix("matrix has no positive eigenvalue")
    return np.maximum(dec.eigenvalues, eigen_floor * lam_max)


def inv_sqrt_factor(a: ArrayLike, eigen_floor: float = DEFAULT_EIGEN_FLOOR) -> Array:
    """Symmetric ``B`` with ``B A' B = I``.

    ``A'`` is `a` with eigenvalues clamped below at ``eigen_floor * lambda_max``,
    so directions with (numerically) no weight are treated as having weight
    ``eigen_floor * lambda_max`` instead of producing an infinite inverse.
    """
    if eigen_floor <= 0:
        raise ValueError("eigen_floor must be positive")
    dec = spectral_decomp(a)
    check_psd(dec)
    w = floored_eigenvalues(dec, eigen_floor)
    return dec.apply(lambda _: 1.0 / np.sqrt(w))


def floored(a: ArrayLike, eigen_floor: float = DEFAULT_EIGEN_FLOOR) -> Array:
    """`a` with eigenvalues clamped below at ``eigen_floor * lambda_max``."""
    dec = spectral_decomp(a)
    check_psd(dec)
    w = floored_eigenvalues(dec, eigen_floor)
    return dec.apply(lambda _: w)


def cholesky_factor(a: ArrayLike, eigen_floor: float = DEFAULT_EIGEN_FLOOR) -> Array:
    """Lower-triangular ``L`` with ``L L^T = A'`` (``A'`` floored as in `inv_sqrt_factor`)."""
    return np.linalg.cholesky(floored(a, eigen_floor))


def projector(basis: Sequence[ArrayLike] | ArrayLike, dim: int) -> Array:
    """Orthogonal projector onto the span of the given vectors.

    `basis` is a sequence of length-`dim` vectors (or a ``k x dim`` array).
    An empty basis gives the zero projector.
    """
    b = np.asarray(basis, dtype=float)
    if b.size == 0:
        return np.zeros((dim, dim))
    b = np.atleast_2d(b)
    if b.shape[1] != dim:
        raise DimensionMismatch(f"basis vectors have length {b.shape[1]}, expected {dim}")
    u, s, _ = np.linalg.svd(b.T, full_matrices=False)
    if s[0] == 0.0:
        raise ZeroBasis("all basis vectors are zero")
    rank = int(np.sum(s > max(b.shape) * np.finfo(float).eps * s[0]))
    ur = u[:, :rank]
    return ur @ ur.T


def complement(p: ArrayLike) -> Array:
    """``I - P`` for a projector ``P``."""
    p = np.asarray(p, dtype=float)
    return np.eye(p.shape[0]) - p


def numerical_rank(a: ArrayLike, rtol: float = 1e-10) -> int:
    """Number of singular values above ``rtol * sigma_max``."""
    s = np.linalg.svd(np.atleast_2d(np.asarray(a, dtype=float)), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def rel_frobenius(a: ArrayLike, b: ArrayLike) -> float:
    """``||a - b||_F / max(||b||_F, tiny)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))
