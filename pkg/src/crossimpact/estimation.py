"""
Covariance estimation from bar data.

Bars are first turned into a :class:`Panel`: underlying returns ``(d spot,
d factors)`` with the factors fitted to each bar's implied-volatility surface,
the bar-open sensitivities ``Xi_t`` and the aggregated flows
``dq_t + Xi_t^T dQ_t``. Covariances are then computed after demeaning with
``1 / (T - 1)`` normalization and divided by the bar width, so every estimate
is a rate per unit time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import matlib
from .errors import ColumnMismatch, InsufficientData, MissingCoordinate, SurfaceFitFailure
from .instruments import Kind, Universe, UniversePricer, VolFactorModel, fit_factors, implied_vol
from .kyle import FlowCov
from .matlib import Array
from .simulator import BarSeries
from .zoo import ScalarObservables

# rows per partial sum in covariance accumulation
CHUNK_ROWS = 4096
# relative size of negative eigenvalues left alone as round-off
PSD_SLACK = 1e-14


@dataclass(frozen=True)
class EstimationConfig:
    demean: Literal["none", "global_mean", "rolling_mean"] = "global_mean"
    window: int = 100
    min_bars: int = 2
    eigen_floor: float = matlib.DEFAULT_EIGEN_FLOOR

    def __post_init__(self):
        if self.demean not in ("none", "global_mean", "rolling_mean"):
            raise ValueError(f"unknown demeaning {self.demean!r}")
        if self.min_bars < 2:
            raise ValueError("min_bars must be at least 2")
        if self.window < 1:
            raise ValueError("window must be positive")


@dataclass
class Panel:
    """Per-bar quantities needed by estimation and scoring."""

    times: Array  # (T,) bar-open times
    underlying_returns: Array  # (T, N)
    agg_flows: Array  # (T, N)
    flows: Array  # (T, D)
    full_returns: Array  # (T, D)
    xi: Array  # (T, M, N) bar-open sensitivities
    factors: Array  # (T, Q) bar-open fitted factors
    dt: float
    n_underlyings: int

    @property
    def n_bars(self) -> int:
        return self.underlying_returns.shape[0]

    def mean_xi(self) -> Array:
        return self.xi.mean(axis=0)

    def subset(self, start: int, stop: int | None = None) -> "Panel":
        s = slice(start, stop)
        return Panel(
            self.times[s],
            self.underlying_returns[s],
            self.agg_flows[s],
            self.flows[s],
            self.full_returns[s],
            self.xi[s],
            self.factors[s],
            self.dt,
            self.n_underlyings,
        )


def surface_observations(universe: Universe, vol_model: VolFactorModel) -> tuple[Array, Array, Array]:
    """Derivative indices that observe the factors, their kinds, and their loadings.

    Options observe their implied volatility and VIX futures observe the level
    factor through ``(price - a) / b``.
    """
    ders = universe.derivatives
    idx = [j for j, d in enumerate(ders) if d.is_option or d.kind is Kind.VIX_FUTURE]
    kinds = np.array([ders[j].kind is Kind.VIX_FUTURE for j in idx], dtype=bool)
    loads = vol_model.loading_matrix([ders[j] for j in idx]) if idx else np.zeros((0, vol_model.n_factors))
    return np.array(idx, dtype=int), kinds, loads


def factor_path(
    prices: Array, times: Array, universe: Universe, vol_model: VolFactorModel, vols: Array | None = None
) -> Array:
    """Fitted factor values for each row of a price panel ``(T, D)``.

    `vols` optionally gives implied volatilities per option column (NaN where
    unquoted is not allowed).
    """
    q = vol_model.n_factors
    nrow = prices.shape[0]
    if q == 0:
        return np.zeros((nrow, 0))
    n = universe.n_underlyings
    idx, is_vix, loads = surface_observations(universe, vol_model)
    if idx.size == 0:
        raise SurfaceFitFailure("no options or VIX futures to fit the volatility factors")
    pricer = UniversePricer(universe, vol_model)
    obs = np.empty((nrow, idx.size))
    der = prices[:, n:]
    vix_cols = idx[is_vix]
    obs[:, is_vix] = (der[:, vix_cols] - vol_model.vix_a) / vol_model.vix_b
    opt_cols = idx[~is_vix]
    if opt_cols.size:
        if vols is not None:
            obs[:, ~is_vix] = vols
        else:
            tau = pricer.maturity[opt_cols][None, :] - times[:, None]
            obs[:, ~is_vix] = implied_vol(
                pricer.cp[opt_cols][None, :],
                der[:, opt_cols],
                prices[:, :1],
                pricer.strike[opt_cols][None, :],
                tau,
                universe.rate,
            )
    bad = ~np.isfinite(obs)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise SurfaceFitFailure(f"implied volatility could not be recovered at bar {row}", bar_index=row)
    return fit_factors(obs, loads).factors


def build_panel(
    bars: BarSeries, universe: Universe, vol_model: VolFactorModel, vols: Array | None = None
) -> Panel:
    """Underlying returns, aggregated flows and sensitivities per bar.

    `vols` are optional per-option implied volatilities aligned with the bar
    rows (one extra leading row when the bars carry opening prices).
    """
    if list(bars.ids) != universe.ids:
        raise ColumnMismatch(f"bar columns {bars.ids} do not match universe {universe.ids}")
    n = universe.n_underlyings
    t_open, opens, dp_full, flows = bars.returns()
    if bars.open_prices is not None:
        snaps = np.vstack([bars.open_prices[None, :], bars.prices])
        snap_t = np.concatenate([[bars.open_time], bars.times])
    else:
        snaps, snap_t = bars.prices, bars.times
    if vols is not None and vols.shape[0] != snaps.shape[0]:
        raise ColumnMismatch(f"got {vols.shape[0]} implied-vol rows for {snaps.shape[0]} price rows")
    factors = factor_path(snaps, snap_t, universe, vol_model, vols)
    under = np.hstack([snaps[:, :1], factors])
    dp = np.diff(under, axis=0)
    f_open = factors[:-1]
    pricer = UniversePricer(universe, vol_model)
    if pricer.m:
        xi = pricer.xi(snaps[:-1, 0], f_open, t_open)
        agg = flows[:, :n] + np.einsum("tmn,tm->tn", xi, flows[:, n:])
    else:
        xi = np.zeros((dp.shape[0], 0, n))
        agg = flows[:, :n].copy()
    return Panel(t_open, dp, agg, flows, dp_full, xi, f_open, bars.dt, n)


def demean(x: Array, how: str, window: int = 100) -> Array:
    """Remove the predictable mean from rows of `x`.

    ``rolling_mean`` subtracts the mean of the previous `window` rows (the first
    row is left as is).
    """
    if how == "none":
        return x
    if how == "global_mean":
        return x - x.mean(axis=0)
    if how == "rolling_mean":
        c = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
        t = np.arange(x.shape[0])
        lo = np.maximum(t - window, 0)
        count = np.maximum(t - lo, 1)
        past = (c[t] - c[lo]) / count[:, None]
        return x - past
    raise ValueError(f"unknown demeaning {how!r}")


def second_moment(x: Array, y: Array | None = None) -> Array:
    """``sum_t x_t y_t^T`` accumulated in fixed-size chunks summed in a fixed order."""
    y = x if y is None else y
    parts = [x[i : i + CHUNK_ROWS].T @ y[i : i + CHUNK_ROWS] for i in range(0, x.shape[0], CHUNK_ROWS)]
    if not parts:
        return np.zeros((x.shape[1], y.shape[1]))
    return np.sum(np.stack(parts), axis=0)


def clip_psd(a: Array) -> Array:
    """Symmetrize and clip negative round-off eigenvalues to zero."""
    a = 0.5 * (a + a.T)
    if not np.any(a):
        return a
    w, u = np.linalg.eigh(a)
    if w[0] >= -PSD_SLACK * abs(w[-1]):
        return a
    return (u * np.maximum(w, 0.0)) @ u.T


def covariance(x: Array, cfg: EstimationConfig, dt: float) -> Array:
    xc = demean(x, cfg.demean, cfg.window)
    return clip_psd(second_moment(xc) / (x.shape[0] - 1) / dt)


@dataclass
class Observables:
    sigma_pp: Array
    omega: FlowCov
    omega_xi: Array
    rho_pp: Array
    omega_risk: Array
    sigma_vec: Array
    n_bars: int
    dt: float

    def to_dict(self) -> dict:
        return {
            "n_bars": self.n_bars,
            "dt": self.dt,
            "sigma_pp": self.sigma_pp.tolist(),
            "omega": self.omega.full.tolist(),
            "omega_xi": self.omega_xi.tolist(),
            "rho_pp": self.rho_pp.tolist(),
            "omega_risk": self.omega_risk.tolist(),
            "sigma_vec": self.sigma_vec.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observables":
        sigma_pp = np.asarray(d["sigma_pp"], dtype=float)
        n = sigma_pp.shape[0]
        return cls(
            sigma_pp=sigma_pp,
            omega=FlowCov.from_full(np.asarray(d["omega"], dtype=float), n, d.get("dt")),
            omega_xi=np.asarray(d["omega_xi"], dtype=float),
            rho_pp=np.asarray(d["rho_pp"], dtype=float),
            omega_risk=np.asarray(d["omega_risk"], dtype=float),
            sigma_vec=np.asarray(d["sigma_vec"], dtype=float),
            n_bars=int(d["n_bars"]),
            dt=float(d["dt"]),
        )


def correlation(cov: Array) -> tuple[Array, Array]:
    """``(diag(s)^-1 cov diag(s)^-1, s)`` with ``s`` the volatilities; zero-variance rows get unit diagonal."""
    s = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    rho = np.clip(cov * inv[:, None] * inv[None, :], -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho, s


def estimate_panel(panel: Panel, cfg: EstimationConfig = EstimationConfig()) -> Observables:
    t = panel.n_bars
    if t < cfg.min_bars:
        raise InsufficientData(f"{t} bars available, at least {cfg.min_bars} required")
    dt = panel.dt
    sigma_pp = covariance(panel.underlying_returns, cfg, dt)
    omega_full = covariance(panel.flows, cfg, dt)
    omega_xi = covariance(panel.agg_flows, cfg, dt)
    rho, s = correlation(sigma_pp)
    risk = (s[:, None] * omega_xi) * s[None, :]
    return Observables(
        sigma_pp=sigma_pp,
        omega=FlowCov.from_full(omega_full, panel.n_underlyings, dt),
        omega_xi=omega_xi,
        rho_pp=rho,
        omega_risk=risk,
        sigma_vec=s,
        n_bars=t,
        dt=dt,
    )


def estimate(
    bars: BarSeries,
    universe: Universe,
    vol_model: VolFactorModel,
    cfg: EstimationConfig = EstimationConfig(),
    vols: Array | None = None,
) -> Observables:
    n_obs = bars.n_bars if bars.open_prices is not None else bars.n_bars - 1
    if n_obs < cfg.min_bars:
        raise InsufficientData(f"{n_obs} bars available, at least {cfg.min_bars} required")
    return estimate_panel(build_panel(bars, universe, vol_model, vols), cfg)


@dataclass(frozen=True)
class LeverageStats:
    scalars: ScalarObservables
    flow_correlation: float  # correlation of delta- and vega-aggregated flows

    def to_dict(self) -> dict:
        return {**self.scalars.to_dict(), "flow_correlation": self.flow_correlation}


def leverage_stats(obs: Observables) -> LeverageStats:
    if obs.sigma_pp.shape[0] < 2:
        raise MissingCoordinate("spot and level coordinates are required")
    o = obs.omega_xi
    denom = np.sqrt(o[0, 0] * o[1, 1])
    flow_corr = float(o[0, 1] / denom) if denom > 0 else 0.0
    return LeverageStats(ScalarObservables.from_covariances(obs.sigma_pp, o), flow_corr)

