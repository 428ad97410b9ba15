"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (also collected in the terminal summary)."""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, small_sim_config
from oracles import random_pd, random_psd

from crossimpact import cli
from crossimpact.config import desk_config, models_of, sim_config_of
from crossimpact.estimation import build_panel, estimate_panel
from crossimpact.evaluation import (
    agg_impact_grid,
    direction_basis,
    direction_pairs,
    path_average_full,
    predicted_slope,
    r_squared,
    score_models,
    underlying_projectors,
)
from crossimpact.instruments import Instrument, Kind, MarketState, Universe, VolFactorModel, sensitivity_matrix
from crossimpact.io import write_json
from crossimpact.kyle import (
    KyleParams,
    aggregate_flow_cov,
    assemble_full,
    check_cross_stability,
    check_fragmentation,
    covariance_consistency_residual,
    full_return_cov,
    kyle_lambda,
)
from crossimpact.matlib import numerical_rank, rel_frobenius
from crossimpact.simulator import simulate
from crossimpact.zoo import ScalarObservables, build_model, delta_vega_vectors, single_factor_exact

TITLES = {
    1: "covariance consistency",
    2: "strong fragmentation invariance",
    3: "cross-stability",
    4: "dimensionality-reduction equivalence",
    5: "worked examples",
    6: "frictionless equivalence",
    7: "estimation round-trip",
    8: "evaluation consistency",
    9: "qualitative model ranking",
    10: "pipeline determinism",
}


def report(k: int, passed: bool, detail: str) -> None:
    line = f"[acceptance {k:2d}] {'PASS' if passed else 'FAIL'}  {TITLES[k]}: {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert passed, line


def tradeable_omega(cfg):
    mask = cfg.universe.tradeable_mask
    return np.where(np.outer(mask, mask), cfg.omega, 0.0)


def path_average_agg_cov(omega, xi):
    """Bar average of the aggregated flow covariance at per-bar sensitivities."""
    n = xi.shape[2]
    qq, qQ, QQ = omega[:n, :n], omega[:n, n:], omega[n:, n:]
    mean_xi = xi.mean(axis=0)
    quad = np.einsum("tmi,mk,tkj->ij", xi, QQ, xi) / xi.shape[0]
    agg = qq + quad + mean_xi.T @ qQ.T + qQ @ mean_xi
    return 0.5 * (agg + agg.T)


# ---------------------------------------------------------------------------


def test_1_covariance_consistency():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 13))
        sigma = random_psd(rng, n, rank=int(rng.integers(1, n + 1)))
        omega = random_pd(rng, n)
        y = float(rng.uniform(0.05, 1.0))
        lam = kyle_lambda(sigma, omega, KyleParams(Y=y))
        worst = max(worst, covariance_consistency_residual(lam, sigma, omega, y))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed < 5.0, f"max residual {worst:.2e} (<= 1e-9), {elapsed:.2f} s (< 5 s)")


def test_2_strong_fragmentation():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(3, 11))
        k = int(rng.integers(1, n))
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        kernel, rng_basis = q[:, :k], q[:, k:]
        b = rng_basis @ rng.standard_normal((n - k, n - k))
        sigma = b @ b.T
        omega = random_pd(rng, n)
        rep = check_fragmentation(sigma, omega, kernel.T)
        worst = max(worst, max(rep.left, rep.right, rep.strong) / rep.lambda_norm)
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-7 and elapsed < 5.0, f"max residual / ||L||_F {worst:.2e} (<= 1e-7), {elapsed:.2f} s (< 5 s)")


def test_3_cross_stability():
    start = time.perf_counter()
    eps = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
    ok, worst_growth, final = True, 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        n = int(rng.integers(3, 8))
        w = int(rng.integers(1, n))
        sigma, omega = random_pd(rng, n), random_pd(rng, n)
        basis = rng.standard_normal((w, n)) if seed % 2 else np.eye(n)[n - w :]
        rep = check_cross_stability(sigma, omega, basis, eps)
        ok &= rep.passed and rep.convergence_error[-1] <= rep.convergence_error[0]
        worst_growth = max(worst_growth, rep.sup_liquid_illiquid / rep.liquid_illiquid[0])
        final = max(final, rep.convergence_error[-1])
    elapsed = time.perf_counter() - start
    report(
        3,
        ok and elapsed < 10.0,
        f"monotone convergence, final error {final:.1e}, sup/eps=1e-2 ratio {worst_growth:.3f} (<= 2), {elapsed:.2f} s (< 10 s)",
    )


def test_4_dimensionality_reduction():
    worst, ranks_ok = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 21))
        xi = rng.standard_normal((m, n))
        sigma_pp = random_pd(rng, n)
        omega = random_pd(rng, n + m)
        params = KyleParams(Y=float(rng.uniform(0.1, 1.0)))
        imp = assemble_full(sigma_pp, omega, xi, params)
        direct = kyle_lambda(full_return_cov(sigma_pp, xi), omega, params)
        worst = max(worst, rel_frobenius(direct, imp.full))
        ranks_ok &= numerical_rank(imp.full, 1e-10) == n
    report(4, worst <= 1e-7 and ranks_ok, f"max rel. Frobenius {worst:.2e} (<= 1e-7), rank = N for all 20")


def test_5_worked_examples():
    y = 0.5
    root_y = np.sqrt(y)
    # futures at r = 0 and at r = 0.05 with half a year to expiry
    uni = Universe((Instrument("S", Kind.SPOT), Instrument("F", Kind.FUTURE, maturity=1.0)), 0.0)
    xi0 = sensitivity_matrix(uni, MarketState(0.5, 100.0, (), 0.0), VolFactorModel(n_factors=0)).Xi
    omega = np.diag([4.0, 0.0])
    fut0 = assemble_full([[0.09]], omega, xi0, KyleParams(Y=y)).full
    exact0 = np.array_equal(fut0, root_y * 0.3 / 2.0 * np.ones((2, 2)))
    uni_r = Universe(uni.instruments, 0.05)
    xi_r = sensitivity_matrix(uni_r, MarketState(0.5, 100.0, (), 0.05), VolFactorModel(n_factors=0)).Xi
    g = np.exp(0.05 * 0.5)
    omega_r = np.diag([4.0, 1.0])
    fut_r = assemble_full([[0.09]], omega_r, xi_r, KyleParams(Y=y)).full
    w = np.sqrt(4.0 + g * g)
    futures_err = rel_frobenius(fut_r, root_y * 0.3 / w * np.array([[1.0, g], [g, g * g]]))

    # Black-Scholes universe: one spot and options with deltas only
    spot, vol = 100.0, 0.2
    opts = [Instrument(f"C{k}", Kind.CALL, k, 1.0) for k in (90.0, 100.0, 110.0)] + [Instrument("P100", Kind.PUT, 100.0, 1.0)]
    bs_uni = Universe((Instrument("S", Kind.SPOT), Instrument("V", Kind.FACTOR)) + tuple(opts))
    delta = sensitivity_matrix(bs_uni, MarketState(0.0, spot, (vol,), 0.0), VolFactorModel(n_factors=1)).Xi[:, :1]
    bs_omega = np.diag([1.0, 0.3, 0.2, 0.2, 0.1])
    full = assemble_full([[(spot * vol) ** 2]], bs_omega, delta, KyleParams(Y=y)).full
    omega_bs = np.sqrt(aggregate_flow_cov(bs_omega, delta)[0, 0])
    t = np.vstack([[1.0], delta])
    bs_err = rel_frobenius(full, root_y * spot * vol / omega_bs * t @ t.T)
    bs_rank = numerical_rank(full, 1e-10)

    # single-factor closed form against the general operator
    sf_err = 0.0
    for rho in (-0.95, -0.7, 0.0, 0.4):
        s, x, a, b = 20.0, 0.1, 1.2, 0.3
        sigma_pp = np.array([[s * s, rho * s * x], [rho * s * x, x * x]])
        lam = kyle_lambda(sigma_pp, np.diag([a * a, b * b]))
        sf_err = max(sf_err, rel_frobenius(single_factor_exact(ScalarObservables(s, x, rho, a, b)), lam))
    ok = exact0 and futures_err <= 1e-12 and bs_err <= 1e-9 and bs_rank == 1 and sf_err <= 1e-9
    report(
        5,
        ok,
        f"futures r=0 exact={exact0}, r=0.05 err {futures_err:.1e}; BS rank-1 err {bs_err:.1e}; single-factor err {sf_err:.1e}",
    )


@pytest.mark.parametrize("y", [0.25, 0.5, 0.9])
def test_6_frictionless_equivalence(y):
    start = time.perf_counter()
    cfg = small_sim_config(Y=y, n_bars=200_000, seed=600 + int(100 * y))
    bars = simulate(cfg)
    _, _, dp, _ = bars.returns()
    target = path_average_full(cfg.sigma_pp, bars.trace.xi) * cfg.dt
    dc = dp - dp.mean(axis=0)
    prod = np.einsum("ti,tj->tij", dc, dc)
    emp = prod.sum(axis=0) / (dp.shape[0] - 1)
    se = prod.std(axis=0, ddof=1) / np.sqrt(dp.shape[0])
    z = np.abs(emp - target) / se
    elapsed = time.perf_counter() - start
    line = f"Y={y}: max |z| {z.max():.2f} (<= 3) over {z.shape[0]}x{z.shape[1]} entries, {elapsed:.1f} s (< 60 s)"
    passed = bool(z.max() <= 3.0) and elapsed < 60.0
    prev = ACCEPTANCE_LINES.get(6)
    if prev is not None and "FAIL" in prev:
        passed_all = False
    else:
        passed_all = passed
    detail = line if prev is None else prev.split(": ", 1)[1] + "; " + line
    report(6, passed_all and passed, detail)


@pytest.fixture(scope="module")
def desk_run():
    cfg_dict = desk_config(n_bars=200_000, seed=7)
    cfg = sim_config_of(cfg_dict)
    bars = simulate(cfg)
    panel = build_panel(bars, cfg.universe, cfg.vol_model)
    return cfg, bars, panel


def test_7_estimation_round_trip(desk_run):
    cfg, bars, panel = desk_run
    omega = tradeable_omega(cfg)
    obs = estimate_panel(panel)
    sigma_err = rel_frobenius(obs.sigma_pp, cfg.sigma_pp)
    omega_err = rel_frobenius(obs.omega_xi, path_average_agg_cov(omega, panel.xi))
    sizes = [1_000, 10_000, 100_000]
    rms = {"sigma": [], "omega_xi": []}
    for size in sizes:
        es, eo = [], []
        for start in range(0, panel.n_bars - size + 1, size):
            sub = panel.subset(start, start + size)
            o = estimate_panel(sub)
            es.append(rel_frobenius(o.sigma_pp, cfg.sigma_pp))
            eo.append(rel_frobenius(o.omega_xi, path_average_agg_cov(omega, sub.xi)))
        rms["sigma"].append(np.sqrt(np.mean(np.square(es))))
        rms["omega_xi"].append(np.sqrt(np.mean(np.square(eo))))
    slopes = {k: float(np.polyfit(np.log10(sizes), np.log10(v), 1)[0]) for k, v in rms.items()}
    ok = sigma_err <= 0.05 and omega_err <= 0.05 and all(abs(s + 0.5) <= 0.15 for s in slopes.values())
    report(
        7,
        ok,
        f"Sigma err {sigma_err:.4f}, Omega_Xi err {omega_err:.4f} (<= 0.05); "
        f"log-log slopes {slopes['sigma']:.3f}, {slopes['omega_xi']:.3f} (-0.5 +/- 0.15)",
    )


def test_8_evaluation_consistency(desk_run):
    cfg, bars, panel = desk_run
    y = cfg.params.Y
    spot_r2 = r_squared(panel, bars.trace.generators, underlying_projectors(4)["spot"], n_boot=200, seed=8)
    r2_ok = abs(spot_r2.value - y) <= 0.02

    dirs = direction_basis(cfg.universe, cfg.vol_model)
    curves = agg_impact_grid(panel, direction_pairs(dirs), n_boot=1000, seed=9)
    lam_true = path_average_full(bars.trace.generators, bars.trace.xi)
    omega_hat = np.cov(panel.flows, rowvar=False)
    z = {}
    for key, c in curves.items():
        c.set_prediction("true", predicted_slope(lam_true, omega_hat, c.u, c.v))
        z[key] = abs(c.slope - c.predicted["true"]) / c.slope_se
    curves_ok = len(z) == 16 and max(z.values()) <= 3.0

    # orthogonal-flow cross pair: level flow made Omega-orthogonal to the delta portfolio
    omega = tradeable_omega(cfg)
    xi = panel.mean_xi()
    delta_c, vega_c = delta_vega_vectors(xi)
    lvl = dirs["level"]
    u = lvl - (delta_c @ omega @ lvl) / (delta_c @ omega @ delta_c) * delta_c
    v = dirs["spot"]
    preds = {}
    for kind in ("bs", "direct-2d", "direct-4d", "kyle-2d", "kyle-4d"):
        preds[kind] = predicted_slope(build_model(kind, cfg.sigma_pp, omega, xi, cfg.params), omega, u, v)
    own = abs(predicted_slope(build_model("bs", cfg.sigma_pp, omega, xi, cfg.params), omega, v, v))
    rho_sign = np.sign(cfg.sigma_pp[0, 1])
    direct_zero = all(abs(preds[k]) <= 1e-12 * own for k in ("bs", "direct-2d", "direct-4d"))
    kyle_signed = all(np.sign(preds[k]) == rho_sign and abs(preds[k]) > 1e-6 * own for k in ("kyle-2d", "kyle-4d"))
    vega_overlap = float(vega_c @ omega @ u) > 0
    emp = agg_impact_grid(panel, {"ortho": (u, v)}, n_boot=1000, seed=10)["ortho"]
    emp_signed = np.sign(emp.slope) == rho_sign and abs(emp.slope) > 3 * emp.slope_se
    ok = r2_ok and curves_ok and direct_zero and kyle_signed and vega_overlap and emp_signed
    worst = max(z, key=z.get)
    report(
        8,
        ok,
        f"true-model R2(spot) {spot_r2.value:.4f} (Y={y} +/- 0.02); 16 curve slopes max |z| {z[worst]:.2f} at {worst} (<= 3); "
        f"orthogonal pair: direct {max(abs(preds[k]) for k in ('bs', 'direct-2d', 'direct-4d')):.1e}, "
        f"kyle-2d {preds['kyle-2d']:.3e}, kyle-4d {preds['kyle-4d']:.3e}, empirical z {emp.slope / emp.slope_se:.1f}",
    )


def test_9_qualitative_ranking():
    kyle, direct = ("kyle-2d", "kyle-4d"), ("bs", "direct-2d", "direct-4d")
    seeds = range(20)
    level, spot, spot_se = [], [], []
    per_seed_ok = True
    for seed in seeds:
        cfg_dict = desk_config(n_bars=20_000, seed=100 + seed)
        sim = sim_config_of(cfg_dict)
        bars = simulate(sim, record=False)
        panel = build_panel(bars, sim.universe, sim.vol_model)
        obs = estimate_panel(panel)
        xi = panel.mean_xi()
        models = {k: build_model(k, obs.sigma_pp, obs.omega, xi, KyleParams(Y=0.5)) for k in models_of(cfg_dict)}
        scores = {r.tag: r.scores for r in score_models(panel, models, n_boot=1000, seed=seed)}
        lv = {k: scores[k]["level"].value for k in models}
        per_seed_ok &= min(lv[k] for k in kyle) > max(lv[k] for k in direct)
        level.append(lv)
        spot.append({k: scores[k]["spot"].value for k in models})
        spot_se.append(scores["kyle-4d"]["spot"].se)
    mean_level = {k: np.mean([d[k] for d in level]) for k in level[0]}
    mean_spot = {k: np.mean([d[k] for d in spot]) for k in spot[0]}
    se = float(np.mean(spot_se))
    mean_ok = min(mean_level[k] for k in kyle) > max(mean_level[k] for k in direct)
    ties = max(abs(mean_spot[k] - mean_spot["kyle-4d"]) for k in mean_spot)
    ok = per_seed_ok and mean_ok and ties <= se
    report(
        9,
        ok,
        "level R2 means "
        + ", ".join(f"{k} {mean_level[k]:.3f}" for k in mean_level)
        + f"; Kyle > direct on every seed={per_seed_ok}; spot spread {ties:.4f} (<= mean SE {se:.4f})",
    )


def test_10_pipeline_determinism(tmp_path):
    cfg = tmp_path / "desk.json"
    write_json(cfg, desk_config())
    names = ["bars.csv", "observables.json", "models.json", "scores.json", "curves.csv", "slopes.csv"]
    codes = [cli.run(["pipeline", "--config", str(cfg), "--out-dir", str(tmp_path / d)]) for d in ("a", "b")]
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    report(10, codes == [0, 0] and same, f"exit codes {codes}; {len(names)} outputs byte-identical={same}")
