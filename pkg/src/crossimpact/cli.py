"""
Command-line front end.

Subcommands: simulate, estimate, fit, evaluate, probe, pipeline. Exit codes are
0 on success, 1 for usage errors, 2 for data errors and 3 for numerical
failures. Every run writes a manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from . import config as cfgmod
from .errors import DataError, NumericalError
from .estimation import Observables, build_panel, estimate_panel, leverage_stats
from .evaluation import (
    agg_impact_grid,
    direction_basis,
    direction_pairs,
    path_average_full,
    predicted_slope,
    score_models,
)
from .io import (
    dumps,
    matrix_from_json,
    matrix_to_json,
    read_bars_csv,
    read_json,
    vectors_from_json,
    write_bars_csv,
    write_json,
)
from .kyle import (
    DEFAULT_EPS,
    KyleParams,
    check_cross_stability,
    check_fragmentation,
    covariance_consistency_residual,
    kyle_lambda,
)
from .simulator import simulate
from .zoo import build_generator

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

CURVE_COLUMNS = ["pair", "u", "v", "bin", "x", "y", "y_se", "count"]
SLOPE_COLUMNS = ["pair", "u", "v", "omega_u", "sigma_v", "slope", "slope_se"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossimpact", description="Kyle cross-impact toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate bars from a market config")
    s.add_argument("--config", help="market config JSON (default: built-in desk market)")
    s.add_argument("--out", required=True, help="bars CSV")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-bars", type=int)
    s.add_argument("--Y", type=float)

    e = sub.add_parser("estimate", help="estimate covariances from bars")
    e.add_argument("--config", required=True, help="config with universe and vol_model")
    e.add_argument("--bars", required=True)
    e.add_argument("--out", required=True, help="observables JSON")
    e.add_argument("--dt", type=float, help="bar width (default: from config, else time column)")

    f = sub.add_parser("fit", help="build model generators from observables")
    f.add_argument("--observables", required=True)
    f.add_argument("--config", help="config providing models and fit_Y")
    f.add_argument("--models", nargs="+")
    f.add_argument("--Y", type=float, help="Y used in the fitted models")
    f.add_argument("--out", required=True, help="models JSON")

    v = sub.add_parser("evaluate", help="score fitted models on bars")
    v.add_argument("--config", required=True)
    v.add_argument("--bars", required=True)
    v.add_argument("--models", required=True, help="models JSON from fit")
    v.add_argument("--out", required=True, help="scores JSON")
    v.add_argument("--curves", help="aggregate impact CSV")
    v.add_argument("--dt", type=float)

    pr = sub.add_parser("probe", help="structural checks of the Kyle operator")
    pr.add_argument("--check", required=True, choices=["fragmentation", "cross-stability", "consistency"])
    pr.add_argument("--sigma", required=True)
    pr.add_argument("--omega", required=True)
    pr.add_argument("--kernel-basis", help="basis of ker(Sigma) for fragmentation")
    pr.add_argument("--illiquid-basis", help="illiquid directions for cross-stability")
    pr.add_argument("--eps", type=float, nargs="+", default=list(DEFAULT_EPS))
    pr.add_argument("--Y", type=float, default=1.0)
    pr.add_argument("--out", help="report JSON (default: stdout)")

    pl = sub.add_parser("pipeline", help="simulate, estimate, fit and evaluate")
    pl.add_argument("--config", help="market config JSON (default: built-in desk market)")
    pl.add_argument("--out-dir", default="crossimpact_out")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--n-bars", type=int)
    return p


# ---------------------------------------------------------------------------


def _sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _manifest(command: str, argv: Sequence[str], cfg: dict | None, seed, outputs: list[Path]) -> dict:
    canonical = dumps(cfg if cfg is not None else {}).encode()
    return {
        "command": command,
        "argv": list(argv),
        "config_sha256": _sha256_bytes(canonical),
        "seed": seed,
        "versions": {
            "crossimpact": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "outputs": {str(p): _sha256_bytes(p.read_bytes()) for p in outputs if p.exists()},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }


def _write_manifest(path: Path, *args) -> None:
    write_json(path, _manifest(*args))


def _manifest_path(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".manifest.json")


def _load_config(path: str | None) -> dict:
    if path is None:
        return cfgmod.desk_config()
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise DataError("config must be a JSON object")
    return cfg


def _bars_dt(cfg: dict, flag: float | None) -> float | None:
    if flag is not None:
        return flag
    return float(cfg["dt"]) if "dt" in cfg else None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, argv) -> int:
    cfg = cfgmod.with_overrides(_load_config(args.config), seed=args.seed, n_bars=args.n_bars, Y=args.Y)
    bars = simulate(cfgmod.sim_config_of(cfg), record=False)
    write_bars_csv(args.out, bars)
    _write_manifest(_manifest_path(args.out), "simulate", argv, cfg, cfg.get("seed"), [Path(args.out)])
    return EXIT_OK


def _observables(cfg: dict, panel) -> dict:
    obs = estimate_panel(panel, cfgmod.estimation_of(cfg))
    out = obs.to_dict()
    try:
        out["leverage"] = leverage_stats(obs).to_dict()
    except (DataError, NumericalError):
        out["leverage"] = None
    return out


def cmd_estimate(args, argv) -> int:
    cfg = _load_config(args.config)
    uni, vm = cfgmod.universe_of(cfg), cfgmod.vol_model_of(cfg)
    bars, vols = read_bars_csv(args.bars, uni, _bars_dt(cfg, args.dt))
    write_json(args.out, _observables(cfg, build_panel(bars, uni, vm, vols)))
    _write_manifest(_manifest_path(args.out), "estimate", argv, cfg, cfg.get("seed"), [Path(args.out)])
    return EXIT_OK


def _fit(obs: Observables, models: list[str], y: float) -> dict:
    params = KyleParams(Y=y)
    return {
        "Y": y,
        "models": {m: {"generator": matrix_to_json(build_generator(m, obs.sigma_pp, obs.omega_xi, params))} for m in models},
    }


def _fit_y(cfg: dict, flag: float | None) -> float:
    if flag is not None:
        return flag
    return float(cfg.get("fit_Y", cfg.get("Y", 1.0)))


def cmd_fit(args, argv) -> int:
    cfg = _load_config(args.config) if args.config else {}
    obs = Observables.from_dict(read_json(args.observables))
    models = args.models or cfgmod.models_of(cfg)
    for m in models:
        cfgmod.models_of({"models": [m]})
    write_json(args.out, _fit(obs, models, _fit_y(cfg, args.Y)))
    _write_manifest(_manifest_path(args.out), "fit", argv, cfg, cfg.get("seed"), [Path(args.out)])
    return EXIT_OK


def _evaluate(cfg: dict, panel, uni, vm, generators: dict[str, np.ndarray]) -> tuple[dict, list[list[str]], list[list[str]]]:
    ev = cfgmod.eval_of(cfg)
    test = panel
    if ev.test_fraction > 0:
        test = panel.subset(int(round((1.0 - ev.test_fraction) * panel.n_bars)))
    reports = score_models(test, generators, n_boot=ev.n_boot, seed=ev.seed)
    dirs = direction_basis(uni, vm)
    pairs = direction_pairs(dirs)
    curves = agg_impact_grid(test, pairs, ev.n_bins, ev.min_count, ev.n_boot, ev.seed + 1)
    omega = np.cov(test.flows, rowvar=False, ddof=1) if test.n_bars > 1 else np.zeros((uni.dim, uni.dim))
    omega = np.atleast_2d(omega)
    for tag, g in generators.items():
        lam = path_average_full(g, test.xi)
        for key, c in curves.items():
            try:
                c.set_prediction(tag, predicted_slope(lam, omega, c.u, c.v))
            except NumericalError:
                c.predicted[tag] = float("nan")
    scores = {
        "n_bars": test.n_bars,
        "test_fraction": ev.test_fraction,
        "models": [r.to_dict() for r in reports],
        "aggregate_impact": {k: {kk: vv for kk, vv in c.to_dict().items() if kk != "bins"} for k, c in curves.items()},
    }
    curve_rows, slope_rows = [], []
    for key, c in curves.items():
        a, b = key.split("->")
        for i, (x, y, se, n) in enumerate(zip(c.x, c.y, c.y_se, c.counts)):
            curve_rows.append([key, a, b, str(i), repr(float(x)), repr(float(y)), repr(float(se)), str(int(n))])
        slope_rows.append([key, a, b] + [repr(float(z)) for z in (c.omega_u, c.sigma_v, c.slope, c.slope_se)])
    return scores, curve_rows, slope_rows


def _write_rows(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_models(path: str) -> dict[str, np.ndarray]:
    obj = read_json(path)
    if "models" not in obj:
        raise DataError("models file needs a 'models' object")
    return {tag: matrix_from_json(m["generator"]) for tag, m in obj["models"].items()}


def cmd_evaluate(args, argv) -> int:
    cfg = _load_config(args.config)
    uni, vm = cfgmod.universe_of(cfg), cfgmod.vol_model_of(cfg)
    bars, vols = read_bars_csv(args.bars, uni, _bars_dt(cfg, args.dt))
    panel = build_panel(bars, uni, vm, vols)
    scores, curve_rows, _ = _evaluate(cfg, panel, uni, vm, _read_models(args.models))
    write_json(args.out, scores)
    outs = [Path(args.out)]
    if args.curves:
        _write_rows(Path(args.curves), CURVE_COLUMNS, curve_rows)
        outs.append(Path(args.curves))
    _write_manifest(_manifest_path(args.out), "evaluate", argv, cfg, cfg.get("seed"), outs)
    return EXIT_OK


def cmd_probe(args, argv) -> int:
    sigma = matrix_from_json(read_json(args.sigma))
    omega = matrix_from_json(read_json(args.omega))
    params = KyleParams(Y=args.Y)
    if args.check == "fragmentation":
        if not args.kernel_basis:
            raise UsageError("--kernel-basis is required for the fragmentation check")
        rep = check_fragmentation(sigma, omega, vectors_from_json(read_json(args.kernel_basis)), params).to_dict()
    elif args.check == "cross-stability":
        if not args.illiquid_basis:
            raise UsageError("--illiquid-basis is required for the cross-stability check")
        rep = check_cross_stability(
            sigma, omega, vectors_from_json(read_json(args.illiquid_basis)), args.eps, params
        ).to_dict()
    else:
        lam = kyle_lambda(sigma, omega, params)
        rep = {
            "residual": covariance_consistency_residual(lam, sigma, omega, params.Y),
            "lambda": matrix_to_json(lam),
        }
    rep = {"check": args.check, **rep}
    if args.out:
        write_json(args.out, rep)
        _write_manifest(_manifest_path(args.out), "probe", argv, None, None, [Path(args.out)])
    else:
        sys.stdout.write(dumps(rep))
        _write_manifest(Path("probe.manifest.json"), "probe", argv, None, None, [])
    return EXIT_OK


def cmd_pipeline(args, argv) -> int:
    cfg = cfgmod.with_overrides(_load_config(args.config), seed=args.seed, n_bars=args.n_bars)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfgmod.sim_config_of(cfg)
    bars = simulate(sim, record=False)
    bars_path = out / "bars.csv"
    write_bars_csv(bars_path, bars)
    # later stages read the CSV back so the pipeline equals the individual commands
    bars, vols = read_bars_csv(bars_path, sim.universe, sim.dt)
    panel = build_panel(bars, sim.universe, sim.vol_model, vols)
    obs_dict = _observables(cfg, panel)
    write_json(out / "observables.json", obs_dict)
    obs = Observables.from_dict(obs_dict)
    models = cfgmod.models_of(cfg)
    fitted = _fit(obs, models, _fit_y(cfg, None))
    write_json(out / "models.json", fitted)
    gens = {tag: matrix_from_json(m["generator"]) for tag, m in fitted["models"].items()}
    scores, curve_rows, slope_rows = _evaluate(cfg, panel, sim.universe, sim.vol_model, gens)
    write_json(out / "scores.json", scores)
    _write_rows(out / "curves.csv", CURVE_COLUMNS, curve_rows)
    _write_rows(out / "slopes.csv", SLOPE_COLUMNS, slope_rows)
    names = ["bars.csv", "observables.json", "models.json", "scores.json", "curves.csv", "slopes.csv"]
    _write_manifest(out / "manifest.json", "pipeline", argv, cfg, cfg.get("seed"), [out / n for n in names])
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "pipeline": cmd_pipeline,
}


def _origin(exc: BaseException) -> tuple[str, str]:
    """Module and function of the innermost package frame that raised `exc`."""
    pkg = Path(__file__).resolve().parent
    module, op = "crossimpact", "?"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename).resolve()
        if path.parent == pkg:
            module, op = f"crossimpact.{path.stem}", frame.name
    return module, op


def _report(kind: str, exc: BaseException, code: int) -> int:
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    if code == EXIT_NUMERICAL:
        err["module"], err["op"] = _origin(exc)
    bar = getattr(exc, "bar_index", None)
    if bar is not None:
        err["bar_index"] = bar
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        return _report("usage", exc, EXIT_USAGE)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        return _report("usage", exc, EXIT_USAGE)
    except NumericalError as exc:
        return _report("numerical", exc, EXIT_NUMERICAL)
    except (DataError, FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        return _report("data", exc, EXIT_DATA)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
