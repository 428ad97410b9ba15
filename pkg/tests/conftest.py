import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crossimpact.instruments import Instrument, Kind, MarketState, Universe, VolFactorModel  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def option_universe(strikes=(90.0, 100.0, 110.0), maturities=(0.5, 1.0), q=3, rate=0.0, vix=2, future=False):
    insts = [Instrument("S", Kind.SPOT)]
    insts += [Instrument(n, Kind.FACTOR) for n in ("L", "K", "T")[:q]]
    if future:
        insts.append(Instrument("F", Kind.FUTURE, maturity=0.75))
    for j in range(vix if q else 0):
        insts.append(Instrument(f"VX{j}", Kind.VIX_FUTURE, maturity=0.6 + 0.2 * j))
    for t in maturities:
        for k in strikes:
            insts.append(Instrument(f"C{int(k)}_{t}", Kind.CALL, k, t))
            insts.append(Instrument(f"P{int(k)}_{t}", Kind.PUT, k, t))
    return Universe(tuple(insts), rate)


@pytest.fixture
def universe4():
    return option_universe()


@pytest.fixture
def vol3():
    return VolFactorModel()


@pytest.fixture
def state3():
    return MarketState(0.05, 101.0, (0.21, 0.015, -0.01), 0.0)


def small_universe():
    """Spot, one level factor, a VIX future and an at-the-money call/put pair (N = 2, M = 3)."""
    return option_universe(strikes=(100.0,), maturities=(0.5,), q=1, vix=1)


def small_sim_config(Y=0.5, n_bars=1000, seed=0, dt=1e-6, rho=-0.7, flow_scale=1.0, **kw):
    from crossimpact.kyle import KyleParams
    from crossimpact.simulator import SimConfig

    uni = small_universe()
    vols = np.array([20.0, 0.1])
    sigma_pp = np.array([[1.0, rho], [rho, 1.0]]) * np.outer(vols, vols)
    omega = flow_scale * np.diag([1.0, 0.0, 0.07**2, 0.05**2, 0.05**2])
    omega[0, 2] = omega[2, 0] = flow_scale * 0.1 * 0.07
    return SimConfig(
        universe=uni,
        vol_model=VolFactorModel(n_factors=1),
        state0=MarketState(0.0, 100.0, (0.2,), 0.0),
        sigma_pp=sigma_pp,
        omega=omega,
        params=KyleParams(Y=Y),
        dt=dt,
        n_bars=n_bars,
        seed=seed,
        **kw,
    )


@pytest.fixture(scope="session")
def long_run():
    """One 10^5-bar simulation of the small universe shared across test modules."""
    from crossimpact.simulator import simulate

    cfg = small_sim_config(Y=0.5, n_bars=100_000, seed=11)
    return cfg, simulate(cfg)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
