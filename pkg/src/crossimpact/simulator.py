"""
Synthetic bars from impacted dynamics.

Each bar draws signed flows ``f ~ N(0, Omega dt)`` on the tradeable
coordinates and moves the underlyings by::

    dp = mu dt + sqrt(1 - Y) Sigma^{1/2} sqrt(dt) z + G_t (f_q + Xi_t^T f_Q)

where ``G_t`` is the Kyle generator at the bar-open sensitivities ``Xi_t``.
Derivatives are then repriced exactly from the simulated underlyings, so they
are efficiently priced at every bar by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from . import matlib
from .errors import DimensionMismatch, ExpiredInstrument, NegativeVol, StateInvalid
from .instruments import MarketState, Universe, UniversePricer, VolFactorModel
from .kyle import KyleParams, KyleSolver
from .matlib import Array


@dataclass(frozen=True)
class SimConfig:
    universe: Universe
    vol_model: VolFactorModel
    state0: MarketState
    sigma_pp: Array  # underlying return covariance per unit time, N x N
    omega: Array  # full flow covariance per unit time, (N+M) x (N+M)
    params: KyleParams = KyleParams()
    mu: Array | None = None
    dt: float = 1.0 / (252 * 78)
    n_bars: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_bars < 1:
            raise ValueError("n_bars must be at least 1")
        n, d = self.universe.n_underlyings, self.universe.dim
        sig = matlib.as_symmetric(self.sigma_pp)
        om = matlib.as_symmetric(self.omega)
        if sig.shape != (n, n):
            raise DimensionMismatch(f"sigma_pp must be {n}x{n}, got {sig.shape}")
        if om.shape != (d, d):
            raise DimensionMismatch(f"omega must be {d}x{d}, got {om.shape}")
        matlib.check_psd(matlib.spectral_decomp(om))
        if len(self.state0.factors) != n - 1:
            raise DimensionMismatch(f"initial state needs {n - 1} factor values")
        mu = np.zeros(n) if self.mu is None else np.asarray(self.mu, dtype=float)
        if mu.shape != (n,):
            raise DimensionMismatch(f"mu must have length {n}")
        object.__setattr__(self, "sigma_pp", sig)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "mu", mu)


@dataclass
class BarSeries:
    """Bar-close prices and flows traded during each bar.

    ``open_prices`` (the state before the first bar) is kept when known so that
    the first bar has a return; bars read back from CSV do not carry it.
    """

    times: Array  # (T,)
    prices: Array  # (T, D)
    flows: Array  # (T, D)
    ids: list[str]
    dt: float
    open_time: float | None = None
    open_prices: Array | None = None
    trace: "SimTrace | None" = field(default=None, repr=False)

    def __post_init__(self):
        t = len(self.times)
        if self.prices.shape != (t, len(self.ids)) or self.flows.shape != (t, len(self.ids)):
            raise DimensionMismatch("times, prices and flows must have matching lengths")

    @property
    def n_bars(self) -> int:
        return len(self.times)

    def returns(self) -> tuple[Array, Array, Array, Array]:
        """``(open_times, open_prices, price_changes, flows)`` per usable bar."""
        if self.open_prices is not None:
            opens = np.vstack([self.open_prices[None, :], self.prices[:-1]])
            t_open = np.concatenate([[self.open_time], self.times[:-1]])
            return t_open, opens, self.prices - opens, self.flows
        return self.times[:-1], self.prices[:-1], np.diff(self.prices, axis=0), self.flows[1:]


@dataclass
class SimTrace:
    """Per-bar quantities of the simulation, for ground-truth comparisons."""

    xi: Array  # (T, M, N) bar-open sensitivities
    generators: Array  # (T, N, N) bar-open Kyle generators
    underlying_returns: Array  # (T, N)
    agg_flows: Array  # (T, N)


def _tradeable_root(omega: Array, mask: Array) -> Array:
    """Symmetric root of the tradeable block of `omega`, scattered into full size."""
    d = omega.shape[0]
    root = np.zeros((d, d))
    idx = np.flatnonzero(mask)
    if idx.size:
        root[np.ix_(idx, idx)] = matlib.spd_sqrt(omega[np.ix_(idx, idx)])
    return root


def simulate(cfg: SimConfig, record: bool = True) -> BarSeries:
    uni, vm = cfg.universe, cfg.vol_model
    pricer = UniversePricer(Universe(uni.instruments, cfg.state0.rate), vm)
    n, m, d = uni.n_underlyings, uni.n_derivatives, uni.dim
    y = cfg.params.Y
    dt, nb = cfg.dt, cfg.n_bars
    rng = np.random.default_rng(cfg.seed)
    mask = uni.tradeable_mask
    omega = cfg.omega.copy()
    omega[~mask, :] = 0.0
    omega[:, ~mask] = 0.0

    # all randomness is drawn upfront in a fixed order
    z_flow = rng.standard_normal((nb, d))
    z_diff = rng.standard_normal((nb, n))
    flows = z_flow @ _tradeable_root(omega, mask) * math.sqrt(dt)
    flows[:, ~mask] = 0.0
    diffusion = math.sqrt(max(1.0 - y, 0.0) * dt) * z_diff @ matlib.spd_sqrt(cfg.sigma_pp)
    drift = cfg.mu * dt

    solver = KyleSolver(cfg.sigma_pp, cfg.params)
    o_qq, o_qQ, o_QQ = omega[:n, :n], omega[:n, n:], omega[n:, n:]
    has_flow = np.any(omega != 0.0)
    loadings = pricer.loadings
    opt = pricer.option_index
    maturities = pricer.maturity
    min_maturity = maturities.min() if m else np.inf

    p = np.concatenate([[cfg.state0.spot], np.asarray(cfg.state0.factors, dtype=float)])
    under = np.empty((nb + 1, n))
    under[0] = p
    xi_path = np.zeros((nb, m, n))
    gen_path = np.zeros((nb, n, n))
    agg_path = np.empty((nb, n))
    times = cfg.state0.t + dt * np.arange(1, nb + 1)
    zero_gen = np.zeros((n, n))
    for k in range(nb):
        t = cfg.state0.t + dt * k
        if not p[0] > 0:
            raise StateInvalid(f"spot is not positive at bar {k}", bar_index=k)
        if t >= min_maturity:
            raise StateInvalid(f"a derivative expired at bar {k}", bar_index=k)
        if opt.size and np.min(loadings[opt] @ p[1:]) <= 0:
            raise StateInvalid(f"implied volatility is not positive at bar {k}", bar_index=k)
        if m:
            xi = pricer.xi_unchecked(p[0], p[1:], t)
            xi_path[k] = xi
            f_q, f_Q = flows[k, :n], flows[k, n:]
            agg = f_q + xi.T @ f_Q
        else:
            xi = np.zeros((0, n))
            agg = flows[k, :n].copy()
        agg_path[k] = agg
        if has_flow:
            omega_xi = o_qq + xi.T @ o_QQ @ xi + xi.T @ o_qQ.T + o_qQ @ xi
            try:
                g = solver(0.5 * (omega_xi + omega_xi.T), check=False)
            except np.linalg.LinAlgError as exc:
                raise StateInvalid(f"impact computation failed at bar {k}: {exc}", bar_index=k) from exc
        else:
            g = zero_gen
        gen_path[k] = g
        p = p + drift + diffusion[k] + g @ agg
        under[k + 1] = p

    if not under[-1, 0] > 0 or (opt.size and np.min(loadings[opt] @ under[-1, 1:]) <= 0):
        raise StateInvalid(f"state became invalid at bar {nb - 1}", bar_index=nb - 1)
    try:
        ders = pricer.prices(under[1:, 0], under[1:, 1:], times) if m else np.zeros((nb, 0))
    except (NegativeVol, ExpiredInstrument) as exc:
        raise StateInvalid(f"repricing failed: {exc}") from exc
    ders0 = pricer.prices(under[0, 0], under[0, 1:], cfg.state0.t) if m else np.zeros(0)

    prices = np.hstack([under[1:], ders])
    trace = None
    if record:
        trace = SimTrace(xi_path, gen_path, np.diff(under, axis=0), agg_path)
    return BarSeries(
        times=times,
        prices=prices,
        flows=flows,
        ids=uni.ids,
        dt=dt,
        open_time=cfg.state0.t,
        open_prices=np.concatenate([under[0], ders0]),
        trace=trace,
    )


@dataclass
class EfficiencyReport:
    residuals: Array  # per bar, sup norm of observed minus model prices
    max_residual: float
    scale: float
    tol: float
    flagged: list[int]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def to_dict(self) -> dict:
        return {
            "max_residual": self.max_residual,
            "price_scale": self.scale,
            "relative_tolerance": self.tol,
            "flagged_bars": self.flagged,
            "passed": self.passed,
        }


def efficiency_check(bars: BarSeries, universe: Universe, vol_model: VolFactorModel, tol: float = 1e-10) -> EfficiencyReport:
    """Compare observed derivative prices with exact repricing from the underlyings."""
    n = universe.n_underlyings
    if list(bars.ids) != universe.ids:
        raise DimensionMismatch("bar columns do not match the universe")
    pricer = UniversePricer(universe, vol_model)
    if pricer.m == 0:
        res = np.zeros(bars.n_bars)
        return EfficiencyReport(res, 0.0, 1.0, tol, [])
    model = pricer.prices(bars.prices[:, 0], bars.prices[:, 1:n], bars.times)
    obs = bars.prices[:, n:]
    res = np.max(np.abs(obs - model), axis=1)
    scale = max(1.0, float(np.max(np.abs(obs))))
    flagged = [int(i) for i in np.flatnonzero(res > tol * scale)]
    return EfficiencyReport(res, float(res.max()), scale, tol, flagged)


def state_at(bars: BarSeries, index: int, universe: Universe, rate: float = 0.0) -> MarketState:
    n = universe.n_underlyings
    row = bars.prices[index]
    return MarketState(float(bars.times[index]), float(row[0]), tuple(row[1:n]), rate)


def sample_cov(x: ArrayLike) -> Array:
    x = np.asarray(x, dtype=float)
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (x.shape[0] - 1)
