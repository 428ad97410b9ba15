"""
Scoring of cross-impact models on bar data.

Two diagnostics are provided:

* the generalized ``R^2(M) = 1 - sum_t e_t^T M e_t / sum_t dp_t^T M dp_t``
  with ``e_t = dp_t - G (dq_t + Xi_t^T dQ_t)`` in underlying coordinates;
* aggregate impact curves ``E[v^T dP_t | u^T dF_t = x]`` on quantile bins of
  the traded flow, together with the through-origin slope and the slope
  predicted by a linear model, ``v^T L Omega u / u^T Omega u``.

Error bars come from an i.i.d. bar bootstrap and are percentile standard
errors, ``(q84 - q16) / 2``. All bootstrap statistics of one call share the same
resampled bar counts, so they are computed in a single pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np
from numpy.typing import ArrayLike

from .errors import DegenerateFlow, DimensionMismatch, ZeroDenominator
from .estimation import Panel
from .instruments import Universe, VolFactorModel
from .kyle import FlowCov, ImpactMatrix
from .matlib import Array, as_symmetric, check_psd, spectral_decomp

N_BOOT = 1000
FACTOR_NAMES = ("level", "skew", "term")
# resampled entries held in memory at once
_BOOT_CELLS = 4_000_000


def bootstrap_counts(n: int, n_boot: int, seed: int) -> Iterator[Array]:
    """Yield ``(chunk, n)`` arrays of multinomial bar counts, ``n_boot`` rows in total."""
    rng = np.random.default_rng(seed)
    chunk = max(1, min(n_boot, _BOOT_CELLS // max(n, 1)))
    done = 0
    while done < n_boot:
        c = min(chunk, n_boot - done)
        idx = rng.integers(0, n, size=(c, n))
        flat = (idx + (np.arange(c) * n)[:, None]).ravel()
        yield np.bincount(flat, minlength=c * n).reshape(c, n).astype(float)
        done += c


def bootstrap_sums(terms: Array, n_boot: int = N_BOOT, seed: int = 0) -> Array:
    """Column sums of `terms` ``(T, K)`` under bar resampling, shape ``(n_boot, K)``."""
    terms = np.asarray(terms, dtype=float)
    return np.vstack([c @ terms for c in bootstrap_counts(terms.shape[0], n_boot, seed)])


def percentile_se(samples: Array, axis: int = 0) -> Array:
    hi, lo = np.percentile(samples, [84.134474606854, 15.865525393146], axis=axis)
    return 0.5 * (hi - lo)


def underlying_projectors(n: int) -> dict[str, Array]:
    """Coordinate projectors of the underlyings: spot, then the factors."""
    names = ("spot",) + FACTOR_NAMES[: n - 1] if n <= 4 else ("spot",) + tuple(f"factor{i}" for i in range(1, n))
    out = {}
    for i, name in enumerate(names):
        p = np.zeros((n, n))
        p[i, i] = 1.0
        out[name] = p
    return out


def predictions(panel: Panel, generator: ArrayLike) -> Array:
    """Predicted underlying returns ``G_t a_t``; `generator` is ``(N, N)`` or per bar ``(T, N, N)``."""
    g = np.asarray(generator, dtype=float)
    if g.ndim == 2:
        return panel.agg_flows @ g.T
    if g.shape[0] != panel.n_bars:
        raise DimensionMismatch(f"{g.shape[0]} generators for {panel.n_bars} bars")
    return np.einsum("tij,tj->ti", g, panel.agg_flows)


def _generator(model) -> Array:
    return model.generator if isinstance(model, ImpactMatrix) else np.asarray(model, dtype=float)


@dataclass
class R2Entry:
    value: float
    se: float

    def to_dict(self) -> dict:
        return {"r2": self.value, "bootstrap_se": self.se}


@dataclass
class ScoreReport:
    tag: str
    n_bars: int
    scores: dict[str, R2Entry]
    se_kind: str = "percentile bootstrap standard error"

    def to_dict(self) -> dict:
        return {
            "model": self.tag,
            "n_bars": self.n_bars,
            "se_kind": self.se_kind,
            "scores": {k: v.to_dict() for k, v in self.scores.items()},
        }


def _r2_terms(dp: Array, pred: Array, m: Array) -> tuple[Array, Array]:
    err = dp - pred
    num = np.einsum("ti,ij,tj->t", err, m, err)
    den = np.einsum("ti,ij,tj->t", dp, m, dp)
    return num, den


def _check_weight(m: ArrayLike, n: int) -> Array:
    m = as_symmetric(m)
    if m.shape != (n, n):
        raise DimensionMismatch(f"weight matrix must be {n}x{n}")
    check_psd(spectral_decomp(m))
    return m


def score_models(
    panel: Panel,
    models: Mapping[str, ArrayLike | ImpactMatrix],
    projectors: Mapping[str, ArrayLike] | None = None,
    n_boot: int = N_BOOT,
    seed: int = 0,
) -> list[ScoreReport]:
    """``R^2`` of every model on every weight matrix, with shared bootstrap resamples."""
    n = panel.n_underlyings
    projectors = underlying_projectors(n) if projectors is None else projectors
    weights = {k: _check_weight(v, n) for k, v in projectors.items()}
    dp = panel.underlying_returns
    cols, keys = [], []
    for tag, model in models.items():
        pred = predictions(panel, _generator(model))
        for name, m in weights.items():
            num, den = _r2_terms(dp, pred, m)
            if not den.sum() > 0:
                raise ZeroDenominator(f"returns have no weight on {name}")
            cols += [num, den]
            keys.append((tag, name))
    terms = np.column_stack(cols) if cols else np.zeros((panel.n_bars, 0))
    full = terms.sum(axis=0)
    boot = bootstrap_sums(terms, n_boot, seed) if n_boot > 0 and cols else None
    reports: dict[str, ScoreReport] = {tag: ScoreReport(tag, panel.n_bars, {}) for tag in models}
    for k, (tag, name) in enumerate(keys):
        value = 1.0 - full[2 * k] / full[2 * k + 1]
        se = 0.0
        if boot is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                reps = 1.0 - boot[:, 2 * k] / boot[:, 2 * k + 1]
            se = float(percentile_se(reps[np.isfinite(reps)]))
        reports[tag].scores[name] = R2Entry(float(value), se)
    return [reports[tag] for tag in models]


def r_squared(
    panel: Panel, model: ArrayLike | ImpactMatrix, M: ArrayLike, n_boot: int = N_BOOT, seed: int = 0
) -> R2Entry:
    """Generalized ``R^2(M)`` of one model (generator, per-bar generators or impact matrix)."""
    tag = model.tag if isinstance(model, ImpactMatrix) and model.tag else "model"
    rep = score_models(panel, {tag: model}, {"M": M}, n_boot, seed)[0]
    return rep.scores["M"]


def r_squared_values(dp: ArrayLike, pred: ArrayLike, M: ArrayLike) -> float:
    """``R^2(M)`` from explicit returns and predictions (no bootstrap)."""
    dp = np.atleast_2d(np.asarray(dp, dtype=float))
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    m = _check_weight(M, dp.shape[1])
    num, den = _r2_terms(dp, pred, m)
    if not den.sum() > 0:
        raise ZeroDenominator("returns have no weight under M")
    return float(1.0 - num.sum() / den.sum())


# ---------------------------------------------------------------------------
# aggregate impact


def direction_basis(universe: Universe, vol_model: VolFactorModel) -> dict[str, Array]:
    """Portfolios in full coordinates: spot, and one per factor from the loading columns.

    Factor portfolios hold each derivative in proportion to its loading on that
    factor (zero on the underlying coordinates).
    """
    n, d = universe.n_underlyings, universe.dim
    spot = np.zeros(d)
    spot[0] = 1.0
    out = {"spot": spot}
    loads = vol_model.loading_matrix(universe.derivatives)
    names = FACTOR_NAMES if vol_model.n_factors <= 3 else tuple(f"factor{i}" for i in range(1, n))
    for q in range(vol_model.n_factors):
        v = np.zeros(d)
        v[n:] = loads[:, q]
        out[names[q]] = v
    return out


def path_average_full(generator: ArrayLike, xi: ArrayLike) -> Array:
    """Time average of ``T_t G_t T_t^T`` over bars (``G`` fixed or per bar)."""
    g = np.asarray(generator, dtype=float)
    xi = np.asarray(xi, dtype=float)
    t = xi.shape[0]
    if g.ndim == 2:
        g = np.broadcast_to(g, (t,) + g.shape)
    gx = np.einsum("tij,tmj->tim", g, xi)  # G Xi^T
    top_left = g.mean(axis=0)
    top_right = gx.mean(axis=0)
    bottom = np.einsum("tmi,tik->tmk", xi, gx).mean(axis=0)
    full = np.block([[top_left, top_right], [top_right.T, bottom]])
    return 0.5 * (full + full.T)


def predicted_slope(model: ArrayLike | ImpactMatrix, Omega: ArrayLike | FlowCov, u: ArrayLike, v: ArrayLike) -> float:
    """``a = v^T L Omega u / u^T Omega u`` for a full-coordinate impact matrix ``L``."""
    lam = model.full if isinstance(model, ImpactMatrix) else np.asarray(model, dtype=float)
    om = Omega.full if isinstance(Omega, FlowCov) else np.asarray(Omega, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if not lam.shape == om.shape == (u.size, u.size) or v.size != u.size:
        raise DimensionMismatch("impact matrix, flow covariance and portfolios must agree in size")
    var = float(u @ om @ u)
    if not var > 0:
        raise DegenerateFlow("portfolio u carries no order flow")
    return float(v @ lam @ om @ u) / var


@dataclass
class AggCurve:
    u: Array
    v: Array
    x: Array  # bin centers of the normalized flow
    y: Array  # per-bin mean of the normalized return
    y_se: Array
    counts: Array
    slope: float  # through-origin slope in normalized units
    slope_se: float
    omega_u: float
    sigma_v: float
    predicted: dict[str, float] = field(default_factory=dict)  # normalized predicted slopes

    def set_prediction(self, tag: str, raw_slope: float) -> None:
        self.predicted[tag] = raw_slope * self.omega_u / self.sigma_v

    def to_dict(self) -> dict:
        return {
            "omega_u": self.omega_u,
            "sigma_v": self.sigma_v,
            "slope": self.slope,
            "slope_se": self.slope_se,
            "predicted_slopes": dict(self.predicted),
            "bins": [
                {"x": float(a), "y": float(b), "y_se": float(c), "count": int(n)}
                for a, b, c, n in zip(self.x, self.y, self.y_se, self.counts)
            ],
        }


def _bin_stats(x: Array, y: Array, n_bins: int, min_count: int):
    edges = np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1))
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sx = np.bincount(which, weights=x, minlength=n_bins)
    sy = np.bincount(which, weights=y, minlength=n_bins)
    syy = np.bincount(which, weights=y * y, minlength=n_bins)
    keep = counts >= max(min_count, 2)
    c = counts[keep].astype(float)
    mx, my = sx[keep] / c, sy[keep] / c
    var = np.maximum(syy[keep] / c - my * my, 0.0) * c / (c - 1)
    return mx, my, np.sqrt(var / c), counts[keep]


def agg_impact_grid(
    panel: Panel,
    pairs: Mapping[str, tuple[ArrayLike, ArrayLike]],
    n_bins: int = 15,
    min_count: int = 50,
    n_boot: int = N_BOOT,
    seed: int = 0,
) -> dict[str, AggCurve]:
    """Aggregate impact curves for several ``(u, v)`` pairs with one bootstrap pass."""
    if n_bins < 3:
        raise ValueError("n_bins must be at least 3")
    d = panel.flows.shape[1]
    curves, cols = {}, []
    for key, (u, v) in pairs.items():
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.size != d or v.size != d:
            raise DimensionMismatch(f"portfolios must have length {d}")
        x = panel.flows @ u
        y = panel.full_returns @ v
        omega_u = float(np.sqrt(np.mean(x * x)))
        if not omega_u > 0:
            raise DegenerateFlow(f"{key}: portfolio u carries no order flow")
        sigma_v = float(np.sqrt(np.mean(y * y)))
        sigma_v = sigma_v if sigma_v > 0 else 1.0
        xn, yn = x / omega_u, y / sigma_v
        mx, my, se, cnt = _bin_stats(xn, yn, n_bins, min_count)
        slope = float(np.dot(xn, yn) / np.dot(xn, xn))
        curves[key] = AggCurve(u, v, mx, my, se, cnt, slope, 0.0, omega_u, sigma_v)
        cols += [xn * yn, xn * xn]
    if n_boot > 0 and cols:
        boot = bootstrap_sums(np.column_stack(cols), n_boot, seed)
        for k, c in enumerate(curves.values()):
            c.slope_se = float(percentile_se(boot[:, 2 * k] / boot[:, 2 * k + 1]))
    return curves


def agg_impact(
    panel: Panel,
    u: ArrayLike,
    v: ArrayLike,
    n_bins: int = 15,
    min_count: int = 50,
    n_boot: int = N_BOOT,
    seed: int = 0,
) -> AggCurve:
    return agg_impact_grid(panel, {"uv": (u, v)}, n_bins, min_count, n_boot, seed)["uv"]


def direction_pairs(directions: Mapping[str, Array]) -> dict[str, tuple[Array, Array]]:
    """All ``(u, v)`` combinations keyed ``"u->v"``."""
    return {f"{a}->{b}": (directions[a], directions[b]) for a in directions for b in directions}
