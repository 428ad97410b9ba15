"""
Run configuration: JSON parsing and the built-in desk-scale market.

A config is a JSON object with the keys below (all optional except where a
command needs them)::

    universe     list of instruments, or {"rate": r, "instruments": [...]}
    vol_model    {"Q", "sigma_ref", "tau_ref", "spot_ref", "vix_a", "vix_b"}
    state0       {"t", "spot", "factors", "rate"}
    sigma_pp     N x N return covariance per unit time
    omega        (N+M) x (N+M) flow covariance per unit time
    mu           drift of the underlyings
    Y, dt, n_bars, seed
    estimation   {"demean", "window", "min_bars"}
    models       list of model tags
    fit_Y        Y used when fitting models (defaults to Y)
    evaluation   {"n_boot", "n_bins", "min_count", "seed", "test_fraction"}

Matrices are nested lists or ``{"dim": n, "data": [...]}``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import DataError
from .estimation import EstimationConfig
from .instruments import Instrument, Kind, MarketState, Universe, UniversePricer, VolFactorModel
from .io import matrix_from_json, read_universe
from .kyle import KyleParams, aggregate_flow_cov
from .simulator import SimConfig
from .zoo import MODEL_KINDS


@dataclass(frozen=True)
class EvalSettings:
    n_boot: int = 1000
    n_bins: int = 15
    min_count: int = 50
    seed: int = 0
    test_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.n_boot < 0 or self.n_bins < 3 or self.min_count < 1:
            raise ValueError("invalid evaluation settings")


def _require(cfg: dict, key: str) -> Any:
    if key not in cfg:
        raise DataError(f"config is missing '{key}'")
    return cfg[key]


def universe_of(cfg: dict) -> Universe:
    return read_universe(_require(cfg, "universe"))


def vol_model_of(cfg: dict) -> VolFactorModel:
    return VolFactorModel.from_dict(cfg.get("vol_model", {}))


def params_of(cfg: dict, key: str = "Y") -> KyleParams:
    y = cfg.get(key, cfg.get("Y", 1.0))
    return KyleParams(Y=float(y))


def state_of(cfg: dict, universe: Universe) -> MarketState:
    s = _require(cfg, "state0")
    return MarketState(
        t=float(s.get("t", 0.0)),
        spot=float(s["spot"]),
        factors=tuple(float(x) for x in s.get("factors", ())),
        rate=float(s.get("rate", universe.rate)),
    )


def sim_config_of(cfg: dict) -> SimConfig:
    uni = universe_of(cfg)
    mu = cfg.get("mu")
    return SimConfig(
        universe=uni,
        vol_model=vol_model_of(cfg),
        state0=state_of(cfg, uni),
        sigma_pp=matrix_from_json(_require(cfg, "sigma_pp")),
        omega=matrix_from_json(_require(cfg, "omega")),
        params=params_of(cfg),
        mu=None if mu is None else np.asarray(mu, dtype=float),
        dt=float(cfg.get("dt", 1e-6)),
        n_bars=int(cfg.get("n_bars", 1000)),
        seed=int(cfg.get("seed", 0)),
    )


def estimation_of(cfg: dict) -> EstimationConfig:
    e = cfg.get("estimation", {})
    return EstimationConfig(
        demean=e.get("demean", "global_mean"),
        window=int(e.get("window", 100)),
        min_bars=int(e.get("min_bars", 2)),
    )


def models_of(cfg: dict) -> list[str]:
    models = list(cfg.get("models", ["bs", "direct-2d", "direct-4d", "kyle-2d", "kyle-4d"]))
    for m in models:
        if m not in MODEL_KINDS:
            raise DataError(f"unknown model {m!r}; expected one of {MODEL_KINDS}")
    return models


def eval_of(cfg: dict) -> EvalSettings:
    e = cfg.get("evaluation", {})
    return EvalSettings(
        n_boot=int(e.get("n_boot", 1000)),
        n_bins=int(e.get("n_bins", 15)),
        min_count=int(e.get("min_count", 50)),
        seed=int(e.get("seed", cfg.get("seed", 0))),
        test_fraction=float(e.get("test_fraction", 0.0)),
    )


# ---------------------------------------------------------------------------
# desk-scale synthetic market

DESK_TARGET_FLOW_CORR = -0.0015


def desk_universe(rate: float = 0.0) -> Universe:
    insts = [
        Instrument("ES", Kind.SPOT),
        Instrument("LEVEL", Kind.FACTOR),
        Instrument("SKEW", Kind.FACTOR),
        Instrument("TERM", Kind.FACTOR),
        Instrument("VX0", Kind.VIX_FUTURE, maturity=0.6),
        Instrument("VX1", Kind.VIX_FUTURE, maturity=0.8),
    ]
    for maturity in (0.5, 1.0):
        for strike in (90.0, 100.0, 110.0):
            tag = f"{int(strike)}_{int(round(maturity * 12))}M"
            insts.append(Instrument(f"C{tag}", Kind.CALL, strike, maturity))
            insts.append(Instrument(f"P{tag}", Kind.PUT, strike, maturity))
    return Universe(tuple(insts), rate)


def desk_config(
    Y: float = 0.5,
    n_bars: int = 20000,
    seed: int = 7,
    dt: float = 1e-6,
    rho: float = -0.8,
    flow_corr: float = DESK_TARGET_FLOW_CORR,
) -> dict:
    """Config dict for a synthetic market with the usual stylized facts.

    Strong negative spot/level return correlation `rho`; the spot/VIX flow
    covariance is set so the delta/vega aggregated flow correlation at the
    initial state equals `flow_corr`.
    """
    uni = desk_universe()
    vm = VolFactorModel()
    state = MarketState(0.0, 100.0, (0.2, 0.0, 0.0), 0.0)
    vols = np.array([20.0, 0.1, 0.03, 0.03])
    corr = np.eye(4)
    corr[0, 1] = corr[1, 0] = rho
    sigma_pp = corr * np.outer(vols, vols)

    n, d = uni.n_underlyings, uni.dim
    flow_sd = np.zeros(d)
    flow_sd[0] = 1.0
    for j, inst in enumerate(uni.derivatives):
        flow_sd[n + j] = 0.07 if inst.kind is Kind.VIX_FUTURE else 0.05
    omega = np.diag(flow_sd**2)
    # the two VIX contracts trade together
    v0, v1 = n, n + 1
    omega[v0, v1] = omega[v1, v0] = 0.5 * flow_sd[v0] * flow_sd[v1]

    xi = UniversePricer(uni, vm).xi(state.spot, np.asarray(state.factors), state.t)
    base = aggregate_flow_cov(omega, xi)
    # d Omega_Xi[0, 1] / d c when c is added to the spot/VIX covariances
    bump = np.zeros((d, d))
    bump[0, v0] = bump[v0, 0] = bump[0, v1] = bump[v1, 0] = 1.0
    slope = aggregate_flow_cov(bump, xi)[0, 1]
    target = flow_corr * math.sqrt(base[0, 0] * base[1, 1])
    c = (target - base[0, 1]) / slope
    omega = omega + c * bump

    return {
        "universe": uni.to_dict(),
        "vol_model": vm.to_dict(),
        "state0": {"t": state.t, "spot": state.spot, "factors": list(state.factors), "rate": state.rate},
        "sigma_pp": sigma_pp.tolist(),
        "omega": omega.tolist(),
        "Y": Y,
        "dt": dt,
        "n_bars": n_bars,
        "seed": seed,
        "estimation": {"demean": "global_mean", "window": 100, "min_bars": 2},
        "models": ["bs", "direct-2d", "direct-4d", "kyle-2d", "kyle-4d"],
        "evaluation": {"n_boot": 1000, "n_bins": 15, "min_count": 50, "test_fraction": 0.0},
    }


def with_overrides(cfg: dict, **kw: Any) -> dict:
    out = copy.deepcopy(cfg)
    for k, v in kw.items():
        if v is not None:
            out[k] = v
    return out
