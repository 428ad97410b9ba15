"""
Instrument universe, pricing and sensitivities.

The universe is ordered as: one spot underlying, ``Q`` non-tradeable volatility
factors, then the derivatives (futures, European calls and puts, VIX futures).
Options are priced with Black-Scholes (no dividends) at the implied volatility
``F^i(s) = sum_q beta^{iq} s^q`` given by a linear factor model. VIX futures are
level-factor trackers ``a + b * s^1``.

Loadings are fixed by the instrument terms (strike, expiry) and a reference
spot, so the spot delta of an option is the plain Black-Scholes delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import ndtr

from .errors import (
    ExpiredInstrument,
    FiniteDifferenceFailure,
    NegativeVol,
    RankDeficientLoadings,
    SurfaceFitFailure,
    UnsupportedUniverse,
)
from .matlib import Array

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Kind(str, Enum):
    SPOT = "SpotUnderlying"
    FACTOR = "FactorUnderlying"
    FUTURE = "Future"
    CALL = "CallOption"
    PUT = "PutOption"
    VIX_FUTURE = "VixFuture"


OPTION_KINDS = (Kind.CALL, Kind.PUT)
DERIVATIVE_KINDS = (Kind.FUTURE, Kind.CALL, Kind.PUT, Kind.VIX_FUTURE)


@dataclass(frozen=True)
class Instrument:
    id: str
    kind: Kind
    strike: float | None = None
    maturity: float | None = None
    factor_loadings: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind in OPTION_KINDS:
            if self.strike is None or self.strike <= 0:
                raise ValueError(f"{self.id}: options need a positive strike")
        if self.kind in DERIVATIVE_KINDS:
            if self.maturity is None or self.maturity <= 0:
                raise ValueError(f"{self.id}: derivatives need a positive maturity")
        if self.factor_loadings is not None:
            object.__setattr__(self, "factor_loadings", tuple(float(x) for x in self.factor_loadings))

    @property
    def is_option(self) -> bool:
        return self.kind in OPTION_KINDS

    @property
    def is_derivative(self) -> bool:
        return self.kind in DERIVATIVE_KINDS

    @property
    def tradeable(self) -> bool:
        return self.kind is not Kind.FACTOR

    def to_dict(self) -> dict:
        out = {"id": self.id, "kind": self.kind.value}
        if self.strike is not None:
            out["strike"] = self.strike
        if self.maturity is not None:
            out["maturity"] = self.maturity
        if self.factor_loadings is not None:
            out["factor_loadings"] = list(self.factor_loadings)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Instrument":
        return cls(
            id=str(d["id"]),
            kind=Kind(d["kind"]),
            strike=d.get("strike"),
            maturity=d.get("maturity"),
            factor_loadings=d.get("factor_loadings"),
        )


@dataclass(frozen=True)
class Universe:
    instruments: tuple[Instrument, ...]
    rate: float = 0.0

    def __post_init__(self):
        insts = tuple(self.instruments)
        object.__setattr__(self, "instruments", insts)
        if not insts or insts[0].kind is not Kind.SPOT:
            raise UnsupportedUniverse("the first instrument must be the spot underlying")
        seen_derivative = False
        for inst in insts[1:]:
            if inst.kind is Kind.SPOT:
                raise UnsupportedUniverse("exactly one spot underlying is supported")
            if inst.kind is Kind.FACTOR and seen_derivative:
                raise UnsupportedUniverse("factor underlyings must precede derivatives")
            seen_derivative |= inst.is_derivative
        ids = [i.id for i in insts]
        if len(set(ids)) != len(ids):
            raise UnsupportedUniverse("instrument ids must be unique")

    @classmethod
    def build(cls, instruments: Iterable[Instrument | dict], rate: float = 0.0) -> "Universe":
        insts = [i if isinstance(i, Instrument) else Instrument.from_dict(i) for i in instruments]
        return cls(tuple(insts), rate)

    @property
    def ids(self) -> list[str]:
        return [i.id for i in self.instruments]

    @property
    def underlyings(self) -> tuple[Instrument, ...]:
        return self.instruments[: self.n_underlyings]

    @property
    def derivatives(self) -> tuple[Instrument, ...]:
        return self.instruments[self.n_underlyings :]

    @property
    def n_factors(self) -> int:
        return sum(1 for i in self.instruments if i.kind is Kind.FACTOR)

    @property
    def n_underlyings(self) -> int:
        return 1 + self.n_factors

    @property
    def n_derivatives(self) -> int:
        return len(self.instruments) - self.n_underlyings

    @property
    def dim(self) -> int:
        return len(self.instruments)

    @property
    def tradeable_mask(self) -> Array:
        return np.array([i.tradeable for i in self.instruments])

    def to_dict(self) -> dict:
        return {"rate": self.rate, "instruments": [i.to_dict() for i in self.instruments]}


@dataclass(frozen=True)
class MarketState:
    t: float
    spot: float
    factors: tuple[float, ...] = ()
    rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(float(x) for x in self.factors))
        if not self.spot > 0:
            raise ValueError("spot must be positive")


@dataclass(frozen=True)
class VolFactorModel:
    """Linear implied-volatility factor model (level, skew, term).

    Loadings for an option with strike ``K`` and expiry ``T``::

        level = 1
        skew  = log(K / spot_ref) / (sigma_ref * sqrt(T))
        term  = (sqrt(T) - sqrt(tau_ref)) / sqrt(tau_ref)

    and the first `n_factors` of these are used. Loadings supplied on the
    instrument override the rule.
    """

    n_factors: int = 3
    sigma_ref: float = 0.2
    tau_ref: float = 0.25
    spot_ref: float = 100.0
    vix_a: float = 0.0
    vix_b: float = 100.0

    def __post_init__(self):
        if self.n_factors < 0:
            raise ValueError("n_factors must be non-negative")
        if self.sigma_ref <= 0 or self.tau_ref <= 0 or self.spot_ref <= 0:
            raise ValueError("sigma_ref, tau_ref and spot_ref must be positive")

    def loadings(self, inst: Instrument) -> Array:
        q = self.n_factors
        if inst.factor_loadings is not None and inst.kind is not Kind.VIX_FUTURE:
            if len(inst.factor_loadings) != q:
                raise UnsupportedUniverse(f"{inst.id}: expected {q} loadings")
            return np.array(inst.factor_loadings, dtype=float)
        if inst.kind is Kind.VIX_FUTURE:
            out = np.zeros(q)
            if q:
                out[0] = 1.0
            return out
        if not inst.is_option:
            return np.zeros(q)
        if q > 3:
            raise UnsupportedUniverse("the default loading rule covers at most 3 factors")
        sqrt_t = math.sqrt(inst.maturity)
        sqrt_ref = math.sqrt(self.tau_ref)
        rule = [
            1.0,
            math.log(inst.strike / self.spot_ref) / (self.sigma_ref * sqrt_t),
            (sqrt_t - sqrt_ref) / sqrt_ref,
        ]
        return np.array(rule[:q])

    def loading_matrix(self, instruments: Sequence[Instrument]) -> Array:
        if not instruments:
            return np.zeros((0, self.n_factors))
        return np.vstack([self.loadings(i) for i in instruments])

    def to_dict(self) -> dict:
        return {
            "Q": self.n_factors,
            "sigma_ref": self.sigma_ref,
            "tau_ref": self.tau_ref,
            "spot_ref": self.spot_ref,
            "vix_a": self.vix_a,
            "vix_b": self.vix_b,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolFactorModel":
        return cls(
            n_factors=int(d.get("Q", d.get("n_factors", 3))),
            sigma_ref=float(d.get("sigma_ref", 0.2)),
            tau_ref=float(d.get("tau_ref", 0.25)),
            spot_ref=float(d.get("spot_ref", 100.0)),
            vix_a=float(d.get("vix_a", 0.0)),
            vix_b=float(d.get("vix_b", 100.0)),
        )


# ---------------------------------------------------------------------------
# Black-Scholes on arrays. cp is +1 for calls and -1 for puts.


def _d1_d2(spot, strike, tau, rate, vol):
    sqrt_tau = np.sqrt(tau)
    vs = vol * sqrt_tau
    d1 = (np.log(spot / strike) + (rate + 0.5 * vol * vol) * tau) / vs
    return d1, d1 - vs, sqrt_tau


def bs_price(cp, spot, strike, tau, rate, vol):
    d1, d2, _ = _d1_d2(spot, strike, tau, rate, vol)
    disc = np.exp(-rate * tau)
    return cp * (spot * ndtr(cp * d1) - strike * disc * ndtr(cp * d2))


def bs_greeks(cp, spot, strike, tau, rate, vol) -> dict[str, Array]:
    """Price and the greeks needed for drift and curvature terms.

    ``theta`` is the derivative with respect to calendar time t (not tau).
    ``vanna`` is d2P/dS dvol and ``volga`` d2P/dvol2.
    """
    d1, d2, sqrt_tau = _d1_d2(spot, strike, tau, rate, vol)
    disc = np.exp(-rate * tau)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * d1 * d1)
    n1 = ndtr(cp * d1)
    n2 = ndtr(cp * d2)
    vega = spot * pdf * sqrt_tau
    return {
        "price": cp * (spot * n1 - strike * disc * n2),
        "delta": ndtr(d1) - (cp < 0),
        "vega": vega,
        "gamma": pdf / (spot * vol * sqrt_tau),
        "vanna": -pdf * d2 / vol,
        "volga": vega * d1 * d2 / vol,
        "theta": -spot * pdf * vol / (2.0 * sqrt_tau) - cp * rate * strike * disc * n2,
    }


def implied_vol(cp, price, spot, strike, tau, rate, tol: float = 1e-13, max_iter: int = 200) -> Array:
    """Black-Scholes implied volatility on arrays (safeguarded Newton).

    Entries whose price lies outside the no-arbitrage bounds come back as NaN.
    """
    cp, price, spot, strike, tau, rate = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (cp, price, spot, strike, tau, rate))
    )
    disc_k = strike * np.exp(-rate * tau)
    lower = np.maximum(cp * (spot - disc_k), 0.0)
    upper = np.where(cp > 0, spot, disc_k)
    bad = (price <= lower) | (price >= upper) | ~np.isfinite(price)
    lo = np.full(price.shape, 1e-8)
    hi = np.full(price.shape, 10.0)
    vol = np.full(price.shape, 0.3)
    for _ in range(max_iter):
        g = bs_greeks(cp, spot, strike, tau, rate, vol)
        diff = g["price"] - price
        hi = np.where(diff > 0, vol, hi)
        lo = np.where(diff <= 0, vol, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = vol - diff / g["vega"]
        inside = (step > lo) & (step < hi) & np.isfinite(step)
        new = np.where(inside, step, 0.5 * (lo + hi))
        done = np.abs(new - vol) <= tol * np.maximum(vol, 1.0)
        vol = new
        if np.all(done | bad):
            break
    return np.where(bad, np.nan, vol)


# ---------------------------------------------------------------------------


@dataclass
class Sensitivities:
    """Derivative-price sensitivities with respect to the underlyings (spot, factors).

    Arrays may carry leading batch dimensions (one per market state).
    """

    Xi: Array  # (..., M, N)
    Theta: Array  # (..., M)
    chi: Array  # (..., M, N, N)
    Delta: Array  # (..., M)
    Vega: Array  # (..., M)
    Upsilon: Array  # (..., M, Q)


_CODES = {Kind.FUTURE: 0, Kind.CALL: 1, Kind.PUT: 2, Kind.VIX_FUTURE: 3}


class UniversePricer:
    """Vectorized pricing of all derivatives of a universe.

    Methods take ``spot`` of shape ``(B,)`` (or scalar), ``factors`` of shape
    ``(B, Q)`` and ``t`` of shape ``(B,)`` and return arrays with a leading
    batch axis when inputs are batched.
    """

    def __init__(self, universe: Universe, model: VolFactorModel):
        if universe.n_factors != model.n_factors:
            raise UnsupportedUniverse(
                f"universe has {universe.n_factors} factor underlyings, model has {model.n_factors}"
            )
        self.universe = universe
        self.model = model
        ders = universe.derivatives
        self.n = universe.n_underlyings
        self.m = len(ders)
        self.q = model.n_factors
        self.rate = universe.rate
        code = np.array([_CODES[d.kind] for d in ders], dtype=int)
        self.code = code
        self.is_future = code == 0
        self.is_option = (code == 1) | (code == 2)
        self.is_vix = code == 3
        if self.is_vix.any() and self.q < 1:
            raise UnsupportedUniverse("VIX futures need a level factor")
        self.cp = np.where(code == 2, -1.0, 1.0)
        self.strike = np.array([d.strike if d.strike is not None else 1.0 for d in ders], dtype=float)
        self.maturity = np.array([d.maturity for d in ders], dtype=float)
        self.loadings = model.loading_matrix(ders) if ders else np.zeros((0, self.q))
        self.option_index = np.flatnonzero(self.is_option)

    # -- helpers
    def _prep(self, spot, factors, t):
        spot = np.asarray(spot, dtype=float)
        batched = spot.ndim > 0
        spot = np.atleast_1d(spot)
        factors = np.asarray(factors, dtype=float).reshape(spot.shape[0], self.q)
        t = np.broadcast_to(np.asarray(t, dtype=float), spot.shape)
        tau = self.maturity[None, :] - t[:, None]
        if self.m and np.any(tau <= 0):
            b, j = np.argwhere(tau <= 0)[0]
            raise ExpiredInstrument(f"{self.universe.derivatives[j].id} expired at t={t[b]}")
        vol = factors @ self.loadings.T
        if self.option_index.size:
            vo = vol[:, self.option_index]
            if np.any(~(vo > 0)):
                b, j = np.argwhere(~(vo > 0))[0]
                inst = self.universe.derivatives[self.option_index[j]]
                raise NegativeVol(f"{inst.id}: implied vol {vo[b, j]:.4g} is not positive")
        # placeholders keep non-option rows finite
        vol_safe = np.where(self.is_option, vol, 1.0)
        return spot, factors, t, tau, vol_safe, batched

    def implied_vols(self, factors) -> Array:
        return np.asarray(factors, dtype=float) @ self.loadings.T

    def prices(self, spot, factors, t) -> Array:
        spot, factors, t, tau, vol, batched = self._prep(spot, factors, t)
        s = spot[:, None]
        out = np.empty_like(tau)
        g = bs_price(self.cp, s, self.strike, tau, self.rate, vol)
        out[:] = np.where(self.is_option, g, 0.0)
        out = np.where(self.is_future, np.exp(self.rate * tau) * s, out)
        if self.is_vix.any():
            out = np.where(self.is_vix, self.model.vix_a + self.model.vix_b * factors[:, :1], out)
        return out if batched else out[0]

    def xi(self, spot, factors, t) -> Array:
        """Sensitivity matrix only (cheaper than :meth:`sensitivities`)."""
        spot, factors, t, tau, vol, batched = self._prep(spot, factors, t)
        s = spot[:, None]
        d1, _, sqrt_tau = _d1_d2(s, self.strike, tau, self.rate, vol)
        delta = np.where(self.is_option, ndtr(d1) - (self.cp < 0), 0.0)
        delta = np.where(self.is_future, np.exp(self.rate * tau), delta)
        vega = np.where(self.is_option, s * _INV_SQRT_2PI * np.exp(-0.5 * d1 * d1) * sqrt_tau, 0.0)
        vega = np.where(self.is_vix, self.model.vix_b, vega)
        out = np.empty(tau.shape + (self.n,))
        out[..., 0] = delta
        out[..., 1:] = vega[..., None] * self.loadings
        return out if batched else out[0]

    def xi_unchecked(self, spot: float, factors: Array, t: float) -> Array:
        """`xi` at one state without validation (caller guarantees a live, positive-vol state)."""
        tau = self.maturity - t
        vol = np.where(self.is_option, self.loadings @ factors, 1.0)
        sqrt_tau = np.sqrt(tau)
        d1 = (np.log(spot / self.strike) + (self.rate + 0.5 * vol * vol) * tau) / (vol * sqrt_tau)
        out = np.empty((self.m, self.n))
        out[:, 0] = np.where(
            self.is_option, ndtr(d1) - (self.cp < 0), np.where(self.is_future, np.exp(self.rate * tau), 0.0)
        )
        vega = np.where(
            self.is_option,
            spot * _INV_SQRT_2PI * np.exp(-0.5 * d1 * d1) * sqrt_tau,
            np.where(self.is_vix, self.model.vix_b, 0.0),
        )
        out[:, 1:] = vega[:, None] * self.loadings
        return out

    def sensitivities(self, spot, factors, t) -> Sensitivities:
        spot, factors, t, tau, vol, batched = self._prep(spot, factors, t)
        s = spot[:, None]
        g = bs_greeks(self.cp, s, self.strike, tau, self.rate, vol)
        opt = self.is_option
        growth = np.exp(self.rate * tau)
        delta = np.where(opt, g["delta"], 0.0)
        delta = np.where(self.is_future, growth, delta)
        vega = np.where(opt, g["vega"], 0.0)
        vega = np.where(self.is_vix, self.model.vix_b, vega)
        theta = np.where(opt, g["theta"], 0.0)
        theta = np.where(self.is_future, -self.rate * growth * s, theta)
        upsilon = vega[..., None] * self.loadings
        xi = np.concatenate([delta[..., None], upsilon], axis=-1)
        b = tau.shape[0]
        chi = np.zeros((b, self.m, self.n, self.n))
        gamma = np.where(opt, g["gamma"], 0.0)
        vanna = np.where(opt, g["vanna"], 0.0)
        volga = np.where(opt, g["volga"], 0.0)
        chi[..., 0, 0] = gamma
        chi[..., 0, 1:] = vanna[..., None] * self.loadings
        chi[..., 1:, 0] = chi[..., 0, 1:]
        chi[..., 1:, 1:] = volga[..., None, None] * (self.loadings[:, :, None] * self.loadings[:, None, :])
        sens = Sensitivities(xi, theta, chi, delta, vega, upsilon)
        if not batched:
            sens = Sensitivities(*(a[0] for a in (xi, theta, chi, delta, vega, upsilon)))
        return sens

    def finite_difference(
        self, spot: float, factors: ArrayLike, t: float, h_spot_rel: float = 1e-4, h_factor: float = 1e-4, h_time: float = 1e-5
    ) -> Sensitivities:
        """Central-difference ``Xi``, ``Theta`` and ``chi`` at a single state (test oracle)."""
        factors = np.asarray(factors, dtype=float)
        steps = np.concatenate([[h_spot_rel * spot], np.full(self.q, h_factor)])
        x0 = np.concatenate([[spot], factors])

        def px(x, tt=t):
            try:
                return self.prices(float(x[0]), x[1:], tt)
            except (NegativeVol, ExpiredInstrument) as exc:
                raise FiniteDifferenceFailure(f"repricing failed at perturbed state: {exc}") from exc

        n = self.n
        e = np.eye(n)
        p0 = px(x0)
        xi = np.empty((self.m, n))
        chi = np.empty((self.m, n, n))
        for j in range(n):
            up, dn = px(x0 + steps[j] * e[j]), px(x0 - steps[j] * e[j])
            xi[:, j] = (up - dn) / (2 * steps[j])
            chi[:, j, j] = (up - 2 * p0 + dn) / steps[j] ** 2
            for k in range(j):
                hj, hk = steps[j] * e[j], steps[k] * e[k]
                val = (px(x0 + hj + hk) - px(x0 + hj - hk) - px(x0 - hj + hk) + px(x0 - hj - hk)) / (
                    4 * steps[j] * steps[k]
                )
                chi[:, j, k] = chi[:, k, j] = val
        theta = (px(x0, t + h_time) - px(x0, t - h_time)) / (2 * h_time)
        vega_proxy = xi[:, 1] if n > 1 else np.zeros(self.m)
        return Sensitivities(xi, theta, chi, xi[:, 0], vega_proxy, xi[:, 1:])


# ---------------------------------------------------------------------------
# single-instrument convenience API


def _single(inst: Instrument, model: VolFactorModel | None, rate: float) -> UniversePricer:
    model = model or VolFactorModel(n_factors=0)
    insts = [Instrument("__spot__", Kind.SPOT)]
    insts += [Instrument(f"__f{q}__", Kind.FACTOR) for q in range(model.n_factors)]
    return UniversePricer(Universe(tuple(insts + [inst]), rate), model)


def price(inst: Instrument, state: MarketState, model: VolFactorModel | None = None, factor_index: int | None = None) -> float:
    """Price of one instrument at a market state.

    Underlyings price at their own level: the spot, or ``state.factors[factor_index]``.
    """
    if inst.kind is Kind.SPOT:
        return state.spot
    if inst.kind is Kind.FACTOR:
        if factor_index is None:
            raise ValueError("factor_index is required to price a factor underlying")
        return state.factors[factor_index]
    pricer = _single(inst, model, state.rate)
    return float(pricer.prices(state.spot, np.asarray(state.factors), state.t)[0])


def greeks(inst: Instrument, state: MarketState, model: VolFactorModel | None = None) -> tuple[float, float]:
    """``(Delta, Vega)`` of a derivative; futures have ``Vega = 0``."""
    pricer = _single(inst, model, state.rate)
    sens = pricer.sensitivities(state.spot, np.asarray(state.factors), state.t)
    return float(sens.Delta[0]), float(sens.Vega[0])


def sensitivity_matrix(universe: Universe, state: MarketState, model: VolFactorModel) -> Sensitivities:
    if universe.n_derivatives == 0:
        raise UnsupportedUniverse("universe has no derivatives")
    if abs(state.rate - universe.rate) > 0:
        universe = Universe(universe.instruments, state.rate)
    pricer = UniversePricer(universe, model)
    return pricer.sensitivities(state.spot, np.asarray(state.factors), state.t)


def universe_prices(universe: Universe, state: MarketState, model: VolFactorModel) -> Array:
    """Prices of every instrument (underlyings first) at `state`."""
    pricer = UniversePricer(Universe(universe.instruments, state.rate), model)
    ders = pricer.prices(state.spot, np.asarray(state.factors), state.t) if pricer.m else np.zeros(0)
    return np.concatenate([[state.spot], np.asarray(state.factors, dtype=float), ders])


@dataclass
class FactorFit:
    factors: Array
    residual: Array | float
    pinv_norm: float = field(default=float("nan"))


def fit_factors(observed_vols: ArrayLike, loadings: ArrayLike, rcond: float = 1e-10) -> FactorFit:
    """Least-squares factor values ``argmin ||vols - B s||_2``.

    `observed_vols` may be a single surface ``(M,)`` or a panel ``(T, M)``.
    """
    b = np.atleast_2d(np.asarray(loadings, dtype=float))
    vols = np.asarray(observed_vols, dtype=float)
    m, q = b.shape
    if m < q:
        raise RankDeficientLoadings(f"{m} observed vols cannot identify {q} factors")
    s = np.linalg.svd(b, compute_uv=False)
    if q and (s[-1] <= rcond * s[0]):
        raise RankDeficientLoadings("loading matrix is rank deficient")
    if not np.all(np.isfinite(vols)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(vols)))[0][0]
        raise SurfaceFitFailure("non-finite implied volatility in the surface", bar_index=int(bad))
    pinv = np.linalg.pinv(b)
    factors = vols @ pinv.T
    resid = np.linalg.norm(vols - factors @ b.T, axis=-1)
    return FactorFit(factors, resid, float(1.0 / s[-1]) if q else 0.0)
