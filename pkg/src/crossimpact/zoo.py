"""
Comparison cross-impact models.

Every model here has the form ``T G T^T`` with ``T = [I; Xi]`` and an
underlying-space generator ``G`` built from the underlying return covariance
``Sigma_pp`` and the aggregated flow covariance ``Omega_Xi``. Writing
``omega_delta^2 = Omega_Xi[0, 0]`` and ``omega_vega^2 = Omega_Xi[1, 1]``:

=========== ===============================================================
bs          ``sigma / omega_delta`` on the spot direction only
direct-2d   adds ``xi / omega_vega`` on the level direction
direct-4d   diagonal ``sqrt(Sigma_ii / Omega_Xi_ii)`` on every underlying
kyle-2d     leverage approximation on the (spot, level) block
kyle-4d     Kyle operator on the four underlyings
kyle-full   Kyle operator on any number of underlyings
=========== ===============================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from . import matlib
from .errors import NonPositiveLiquidity, UnsupportedUniverse
from .kyle import FlowCov, ImpactMatrix, KyleParams, aggregate_flow_cov, kyle_lambda
from .matlib import Array

MODEL_KINDS = ("bs", "direct-2d", "direct-4d", "kyle-2d", "kyle-4d", "kyle-full")


@dataclass(frozen=True)
class ScalarObservables:
    sigma: float
    xi: float
    rho: float
    omega_delta: float
    omega_vega: float

    def __post_init__(self):
        for name in ("sigma", "xi", "omega_delta", "omega_vega"):
            if not getattr(self, name) > 0:
                raise NonPositiveLiquidity(f"{name} must be positive, got {getattr(self, name)}")
        if not abs(self.rho) <= 1.0:
            raise ValueError(f"correlation must lie in [-1, 1], got {self.rho}")

    @classmethod
    def from_covariances(cls, sigma_pp: ArrayLike, omega_xi: ArrayLike) -> "ScalarObservables":
        s = np.asarray(sigma_pp, dtype=float)
        o = np.asarray(omega_xi, dtype=float)
        if s.shape[0] < 2:
            raise UnsupportedUniverse("scalar observables need spot and level coordinates")
        if not (o[0, 0] > 0 and o[1, 1] > 0):
            raise NonPositiveLiquidity("aggregated liquidity on spot or level is not positive")
        sigma, xi = math.sqrt(s[0, 0]), math.sqrt(s[1, 1])
        rho = float(np.clip(s[0, 1] / (sigma * xi), -1.0, 1.0)) if sigma * xi > 0 else 0.0
        return cls(sigma, xi, rho, math.sqrt(o[0, 0]), math.sqrt(o[1, 1]))

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "xi": self.xi,
            "rho": self.rho,
            "omega_delta": self.omega_delta,
            "omega_vega": self.omega_vega,
        }


def single_factor_exact(obs: ScalarObservables) -> Array:
    """Closed-form Kyle generator on (spot, level) when delta and vega flows are uncorrelated.

    With ``s = sigma``, ``x = xi``, ``c = sqrt(1 - rho^2)``, ``a = omega_delta`` and
    ``b = omega_vega``::

        G = [[s^2 + (b/a) s x c,  s x rho          ],
             [s x rho,            x^2 + (a/b) s x c]] / sqrt(s^2 a^2 + x^2 b^2 + 2 s x c a b)
    """
    s, x, a, b = obs.sigma, obs.xi, obs.omega_delta, obs.omega_vega
    c = math.sqrt(max(1.0 - obs.rho**2, 0.0))
    denom = math.sqrt(s * s * a * a + x * x * b * b + 2.0 * s * x * c * a * b)
    return (
        np.array(
            [
                [s * s + (b / a) * s * x * c, s * x * obs.rho],
                [s * x * obs.rho, x * x + (a / b) * s * x * c],
            ]
        )
        / denom
    )


def _need_factors(kind: str, n: int) -> None:
    if kind in ("direct-2d", "kyle-2d") and n < 2:
        raise UnsupportedUniverse(f"{kind} needs a level factor")
    if kind in ("direct-4d", "kyle-4d") and n != 4:
        raise UnsupportedUniverse(f"{kind} needs exactly three volatility factors, universe has {n - 1}")


def build_generator(kind: str, sigma_pp: ArrayLike, omega_xi: ArrayLike, params: KyleParams = KyleParams()) -> Array:
    """Underlying-space generator ``G`` of model `kind`."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model {kind!r}; expected one of {MODEL_KINDS}")
    sigma_pp = matlib.as_symmetric(sigma_pp)
    omega_xi = matlib.as_symmetric(omega_xi)
    n = sigma_pp.shape[0]
    _need_factors(kind, n)
    if kind in ("kyle-4d", "kyle-full"):
        return kyle_lambda(sigma_pp, omega_xi, params)

    root_y = math.sqrt(params.Y)
    var = np.diag(sigma_pp)
    liq = np.diag(omega_xi)
    used = {"bs": 1, "direct-2d": 2, "kyle-2d": 2, "direct-4d": n}[kind]
    if np.any(liq[:used] <= 0):
        raise NonPositiveLiquidity(f"{kind}: aggregated liquidity is not positive on a used direction")
    g = np.zeros((n, n))
    if kind == "kyle-2d":
        obs = ScalarObservables.from_covariances(sigma_pp, omega_xi)
        s, x, rho = obs.sigma, obs.xi, obs.rho
        g[0, 0] = s / obs.omega_delta
        g[0, 1] = g[1, 0] = x * rho / obs.omega_delta
        g[1, 1] = x * math.sqrt(max(1.0 - rho * rho, 0.0)) / obs.omega_vega
    else:
        idx = np.arange(used)
        g[idx, idx] = np.sqrt(var[:used] / liq[:used])
    return root_y * g


def build_model(
    kind: str,
    sigma_pp: ArrayLike,
    omega: FlowCov | ArrayLike,
    Xi: ArrayLike,
    params: KyleParams = KyleParams(),
) -> ImpactMatrix:
    """Full (N+M)-dimensional impact matrix of model `kind` at sensitivities `Xi`."""
    omega_xi = aggregate_flow_cov(omega, Xi)
    g = build_generator(kind, sigma_pp, omega_xi, params)
    return ImpactMatrix.from_generator(g, Xi, kind)


def delta_vega_vectors(Xi: ArrayLike) -> tuple[Array, Array]:
    """``delta_c = T e_spot`` and ``vega_c = T e_level`` in full coordinates."""
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    m, n = Xi.shape
    if n < 2:
        raise UnsupportedUniverse("vega direction needs a level factor")
    delta_c = np.concatenate([np.eye(n)[0], Xi[:, 0]])
    vega_c = np.concatenate([np.eye(n)[1], Xi[:, 1]])
    return delta_c, vega_c
