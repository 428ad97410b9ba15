"""
Kyle cross-impact operator and its structural probes.

``kyle_lambda(Sigma, Omega)`` returns the unique symmetric PSD ``L`` with
``L Omega L = Sigma``::

    L = (Omega^{-1/2})^T sqrt((Omega^{1/2})^T Sigma Omega^{1/2}) Omega^{-1/2}

The operator is evaluated on the range of ``Sigma``. For positive definite
``Omega`` the result vanishes on ``ker(Sigma)``, so restricting to the range is
exact and it keeps the evaluation accurate when ``Sigma`` is rank deficient
(derivative universes, where mispricing directions have zero variance).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import solve_triangular

from . import matlib
from .errors import DimensionMismatch, IndefiniteInput, NotInKernel, ZeroMatrix
from .matlib import Array

# eigenvalues of Sigma below this (relative) are treated as exact zeros
RANGE_RTOL = 1e-13
# round-off eigenvalues of the inner PSD matrix are zeroed before the sqrt
ROOT_CUTOFF = 1e-14
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class KyleParams:
    """``Y`` is the fraction of return variance driven by order flow."""

    Y: float = 1.0
    eigen_floor: float = matlib.DEFAULT_EIGEN_FLOOR

    def __post_init__(self):
        if not 0.0 < self.Y <= 1.0:
            raise ValueError(f"Y must lie in (0, 1], got {self.Y}")
        if self.eigen_floor <= 0.0:
            raise ValueError("eigen_floor must be positive")


@dataclass(frozen=True)
class FlowCov:
    """Order-flow covariance split into underlying (q) and derivative (Q) blocks."""

    qq: Array
    qQ: Array
    QQ: Array
    bin_width: float | None = None

    @classmethod
    def from_full(cls, omega: ArrayLike, n_underlyings: int, bin_width: float | None = None) -> "FlowCov":
        omega = matlib.as_symmetric(omega)
        n = n_underlyings
        if not 0 < n <= omega.shape[0]:
            raise DimensionMismatch(f"cannot split a {omega.shape[0]}-dim covariance at {n}")
        return cls(omega[:n, :n], omega[:n, n:], omega[n:, n:], bin_width)

    @property
    def n(self) -> int:
        return self.qq.shape[0]

    @property
    def m(self) -> int:
        return self.QQ.shape[0]

    @property
    def full(self) -> Array:
        return np.block([[self.qq, self.qQ], [self.qQ.T, self.QQ]])


def lift(Xi: ArrayLike) -> Array:
    """The ``(N+M) x N`` matrix ``[I; Xi]`` mapping underlying moves to all prices."""
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    return np.vstack([np.eye(Xi.shape[1]), Xi])


@dataclass(frozen=True)
class ImpactMatrix:
    full: Array
    generator: Array
    Xi: Array
    tag: str = ""

    @classmethod
    def from_generator(cls, generator: ArrayLike, Xi: ArrayLike, tag: str = "") -> "ImpactMatrix":
        g = np.asarray(generator, dtype=float)
        Xi = np.asarray(Xi, dtype=float).reshape(-1, g.shape[0])
        t = lift(Xi)
        full = t @ g @ t.T
        return cls(0.5 * (full + full.T), g, Xi, tag)

    @property
    def n(self) -> int:
        return self.generator.shape[0]

    @property
    def m(self) -> int:
        return self.Xi.shape[0]

    def rank(self, rtol: float = RANK_RTOL) -> int:
        return matlib.numerical_rank(self.full, rtol)

    def block_residual(self) -> float:
        """Relative Frobenius distance between `full` and its block form in the generator."""
        return matlib.rel_frobenius(self.full, ImpactMatrix.from_generator(self.generator, self.Xi).full)


class KyleSolver:
    """``Omega -> kyle_lambda(Sigma, Omega)`` for a fixed ``Sigma``.

    Decomposes ``Sigma`` once; useful when the flow covariance changes from one
    evaluation to the next (state-dependent sensitivities) but returns do not.
    """

    def __init__(self, Sigma: ArrayLike, params: KyleParams = KyleParams(), range_rtol: float = RANGE_RTOL):
        dec = matlib.spectral_decomp(Sigma)
        matlib.check_psd(dec)
        self.params = params
        self.dim = dec.dim
        lam_max = dec.eigenvalues[-1]
        keep = dec.eigenvalues > range_rtol * lam_max if lam_max > 0 else np.zeros(dec.dim, bool)
        self.basis = dec.eigenvectors[:, keep]
        self.sigma_r = np.diag(dec.eigenvalues[keep])

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def __call__(
        self,
        Omega: ArrayLike,
        factor: Literal["symmetric", "cholesky"] = "symmetric",
        check: bool = True,
    ) -> Array:
        if check:
            Omega = matlib.as_symmetric(Omega)
            if Omega.shape[0] != self.dim:
                raise DimensionMismatch(f"Sigma is {self.dim}-dim but Omega is {Omega.shape[0]}-dim")
            matlib.check_psd(matlib.spectral_decomp(Omega))
        else:
            Omega = np.asarray(Omega, dtype=float)
        if self.rank == 0:
            return np.zeros((self.dim, self.dim))
        q = self.basis
        omega_r = q.T @ Omega @ q
        omega_r = 0.5 * (omega_r + omega_r.T)
        lam_r = _kyle_dense(self.sigma_r, omega_r, self.params.eigen_floor, factor)
        lam = q @ lam_r @ q.T
        return np.sqrt(self.params.Y) * 0.5 * (lam + lam.T)


def _kyle_dense(sigma: Array, omega: Array, eigen_floor: float, factor: str) -> Array:
    w, u = np.linalg.eigh(omega)
    if w[-1] <= 0.0:
        raise ZeroMatrix("order-flow covariance has no positive eigenvalue")
    w = np.maximum(w, eigen_floor * w[-1])
    if factor == "symmetric":
        half = (u * np.sqrt(w)) @ u.T
        inv_half = (u * (1.0 / np.sqrt(w))) @ u.T
        inner = half @ sigma @ half
        root = _psd_root(inner)
        return inv_half @ root @ inv_half
    if factor == "cholesky":
        chol = np.linalg.cholesky((u * w) @ u.T)
        inner = chol.T @ sigma @ chol
        root = _psd_root(inner)
        # L^{-T} root L^{-1}
        tmp = solve_triangular(chol, root, lower=True, trans="T")
        return solve_triangular(chol, tmp.T, lower=True, trans="T").T
    raise ValueError(f"unknown factor {factor!r}")


def _psd_root(a: Array) -> Array:
    a = 0.5 * (a + a.T)
    w, u = np.linalg.eigh(a)
    top = max(w[-1], 0.0)
    w = np.where(w <= ROOT_CUTOFF * top, 0.0, w)
    return (u * np.sqrt(w)) @ u.T


def kyle_lambda(
    Sigma: ArrayLike,
    Omega: ArrayLike,
    params: KyleParams = KyleParams(),
    factor: Literal["symmetric", "cholesky"] = "symmetric",
) -> Array:
    """``sqrt(Y) * L`` where ``L`` is the symmetric PSD solution of ``L Omega L = Sigma``.

    `Omega` may be singular; its eigenvalues are floored at
    ``params.eigen_floor * lambda_max`` on the range of `Sigma`.
    `factor` picks the square-root factor of `Omega`; the result does not
    depend on it beyond round-off.
    """
    Sigma = matlib.as_symmetric(Sigma)
    Omega = matlib.as_symmetric(Omega)
    if Sigma.shape != Omega.shape:
        raise DimensionMismatch(f"Sigma {Sigma.shape} and Omega {Omega.shape} differ")
    return KyleSolver(Sigma, params)(Omega, factor=factor)


def aggregate_flow_cov(omega: FlowCov | ArrayLike, Xi: ArrayLike) -> Array:
    """Covariance of the aggregated flow ``dq + Xi^T dQ``.

    Equals ``Omega_qq + Xi^T Omega_QQ Xi + Xi^T Omega_Qq + Omega_qQ Xi``.
    """
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    if not isinstance(omega, FlowCov):
        omega = FlowCov.from_full(omega, Xi.shape[1])
    if Xi.shape != (omega.m, omega.n):
        raise DimensionMismatch(f"Xi has shape {Xi.shape}, expected {(omega.m, omega.n)}")
    agg = omega.qq + Xi.T @ omega.QQ @ Xi + Xi.T @ omega.qQ.T + omega.qQ @ Xi
    return 0.5 * (agg + agg.T)


def full_return_cov(sigma_pp: ArrayLike, Xi: ArrayLike) -> Array:
    """Return covariance of the whole universe implied by efficient pricing."""
    t = lift(Xi)
    full = t @ np.asarray(sigma_pp, dtype=float) @ t.T
    return 0.5 * (full + full.T)


def assemble_full(
    sigma_pp: ArrayLike,
    omega: FlowCov | ArrayLike,
    Xi: ArrayLike,
    params: KyleParams = KyleParams(),
    tag: str = "kyle-full",
) -> ImpactMatrix:
    """Full cross-impact matrix from the underlying-space generator.

    The generator is ``sqrt(Y) * kyle_lambda(Sigma_pp, Omega_Xi)``; the full
    matrix is ``[[G, G Xi^T], [Xi G, Xi G Xi^T]]``.
    """
    sigma_pp = matlib.as_symmetric(sigma_pp)
    omega_xi = aggregate_flow_cov(omega, Xi)
    if omega_xi.shape != sigma_pp.shape:
        raise DimensionMismatch(f"Sigma_pp {sigma_pp.shape} vs aggregated flow {omega_xi.shape}")
    generator = kyle_lambda(sigma_pp, omega_xi, params)
    return ImpactMatrix.from_generator(generator, Xi, tag)


def covariance_consistency_residual(Lambda: ArrayLike, Sigma: ArrayLike, Omega: ArrayLike, Y: float = 1.0) -> float:
    """``||L Omega L^T - Y Sigma||_F / max(||Y Sigma||_F, tiny)``."""
    lam = np.asarray(Lambda, dtype=float)
    sigma = np.asarray(Sigma, dtype=float)
    omega = np.asarray(Omega, dtype=float)
    if not lam.shape == sigma.shape == omega.shape:
        raise DimensionMismatch(f"shapes {lam.shape}, {sigma.shape}, {omega.shape} differ")
    target = Y * sigma
    denom = max(np.linalg.norm(target), np.finfo(float).tiny)
    return float(np.linalg.norm(lam @ omega @ lam.T - target) / denom)


@dataclass
class FragmentationReport:
    left: float  # ||Pi_V L||_F
    right: float  # ||L Pi_V||_F
    strong: float  # ||L(Sigma, Pbar Omega Pbar) - L(Sigma, Omega)||_F
    lambda_norm: float
    tol: float = 1e-7

    @property
    def passed(self) -> bool:
        bound = self.tol * self.lambda_norm
        return max(self.left, self.right, self.strong) <= bound

    def to_dict(self) -> dict:
        return {
            "left_residual": self.left,
            "right_residual": self.right,
            "strong_residual": self.strong,
            "lambda_norm": self.lambda_norm,
            "relative_tolerance": self.tol,
            "passed": self.passed,
        }


def check_fragmentation(
    Sigma: ArrayLike,
    Omega: ArrayLike,
    V_basis: Sequence[ArrayLike] | ArrayLike,
    params: KyleParams = KyleParams(),
    kernel_tol: float = 1e-10,
    tol: float = 1e-7,
) -> FragmentationReport:
    """Residuals of the three fragmentation identities for ``V`` inside ``ker(Sigma)``."""
    Sigma = matlib.as_symmetric(Sigma)
    n = Sigma.shape[0]
    basis = np.asarray(V_basis, dtype=float).reshape(-1, n)
    scale = max(np.linalg.norm(Sigma, 2), np.finfo(float).tiny)
    for i, v in enumerate(basis):
        if np.linalg.norm(Sigma @ v) > kernel_tol * scale * np.linalg.norm(v):
            raise NotInKernel(f"basis vector {i} is not in ker(Sigma)")
    p = matlib.projector(basis, n)
    pbar = matlib.complement(p)
    lam = kyle_lambda(Sigma, Omega, params)
    lam_frag = kyle_lambda(Sigma, pbar @ np.asarray(Omega, dtype=float) @ pbar, params)
    return FragmentationReport(
        left=float(np.linalg.norm(p @ lam)),
        right=float(np.linalg.norm(lam @ p)),
        strong=float(np.linalg.norm(lam_frag - lam)),
        lambda_norm=float(np.linalg.norm(lam)),
        tol=tol,
    )


@dataclass
class CrossStabilityReport:
    eps: list[float]
    liquid_illiquid: list[float]  # ||Pbar L_eps Pi_W||_F per eps
    convergence_error: list[float]  # ||Pbar L_eps Pbar - limit||_F / ||limit||_F per eps
    limit_norm: float
    slack: float = field(default=64 * np.finfo(float).eps)

    @property
    def sup_liquid_illiquid(self) -> float:
        return max(self.liquid_illiquid)

    @property
    def bounded(self) -> bool:
        return self.sup_liquid_illiquid <= 2.0 * self.liquid_illiquid[0]

    @property
    def monotone(self) -> bool:
        err = self.convergence_error
        return all(b <= a + self.slack for a, b in zip(err, err[1:]))

    @property
    def passed(self) -> bool:
        return self.bounded and self.monotone

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "liquid_illiquid_norm": self.liquid_illiquid,
            "sup_liquid_illiquid_norm": self.sup_liquid_illiquid,
            "convergence_error": self.convergence_error,
            "limit_norm": self.limit_norm,
            "bounded": self.bounded,
            "monotone": self.monotone,
            "passed": self.passed,
        }


DEFAULT_EPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


def check_cross_stability(
    Sigma: ArrayLike,
    Omega: ArrayLike,
    W_basis: Sequence[ArrayLike] | ArrayLike,
    eps_list: Sequence[float] = DEFAULT_EPS,
    params: KyleParams = KyleParams(),
) -> CrossStabilityReport:
    """Shrink the liquidity of the ``W`` directions by ``eps`` and track the impact blocks.

    ``Omega_eps = (Pbar + eps Pi_W) Omega (Pbar + eps Pi_W)``. The liquid-liquid
    block should approach the impact of the reduced (liquid-only) model and the
    liquid-illiquid block should stay finite.
    """
    Sigma = matlib.as_symmetric(Sigma)
    Omega = matlib.as_symmetric(Omega)
    n = Sigma.shape[0]
    eps = [float(e) for e in eps_list]
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps_list must be positive and strictly decreasing")
    pw = matlib.projector(np.asarray(W_basis, dtype=float).reshape(-1, n), n)
    pbar = matlib.complement(pw)
    w, u = np.linalg.eigh(Omega)
    if w[0] <= 0.0:
        raise IndefiniteInput("cross-stability needs a positive definite Omega")
    limit = pbar @ kyle_lambda(pbar @ Sigma @ pbar, pbar @ Omega @ pbar, params) @ pbar
    limit_norm = float(np.linalg.norm(limit))
    sigma_root = matlib.spd_sqrt(Sigma)
    omega_root = (u * np.sqrt(w)) @ u.T
    omega_inv_root = (u / np.sqrt(w)) @ u.T
    liq_ill, conv = [], []
    for e in eps:
        # Omega_eps = D Omega D is too ill-conditioned to use directly once eps^2 nears
        # round-off; L(Sigma, D Omega D) = D^-1 L(D Sigma D, Omega) D^-1 avoids forming it
        j = omega_root @ (pbar + e * pw) @ sigma_root
        left, sv, _ = np.linalg.svd(j)
        inner = omega_inv_root @ ((left * sv) @ left.T) @ omega_inv_root
        d_inv = pbar + pw / e
        lam = np.sqrt(params.Y) * (d_inv @ inner @ d_inv)
        lam = 0.5 * (lam + lam.T)
        liq_ill.append(float(np.linalg.norm(pbar @ lam @ pw)))
        conv.append(float(np.linalg.norm(pbar @ lam @ pbar - limit) / max(limit_norm, np.finfo(float).tiny)))
    return CrossStabilityReport(eps, liq_ill, conv, limit_norm)
