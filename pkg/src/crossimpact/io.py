"""File formats: matrix JSON, bar CSV and canonical JSON output."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from .errors import ColumnMismatch, DataError, DimensionMismatch
from .instruments import Universe
from .matlib import Array
from .simulator import BarSeries


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8", newline="\n")


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def matrix_to_json(a: ArrayLike) -> dict:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch("only square matrices are serialized")
    return {"dim": a.shape[0], "data": a.ravel().tolist()}


def matrix_from_json(obj: Any) -> Array:
    """Accepts ``{"dim": n, "data": [row-major]}`` or a nested list."""
    if isinstance(obj, dict):
        if "dim" not in obj or "data" not in obj:
            raise DataError("matrix JSON needs 'dim' and 'data'")
        n = int(obj["dim"])
        data = np.asarray(obj["data"], dtype=float).ravel()
        if data.size != n * n:
            raise DimensionMismatch(f"matrix of dim {n} needs {n * n} entries, got {data.size}")
        return data.reshape(n, n)
    a = np.asarray(obj, dtype=float)
    if a.ndim != 2:
        raise DataError("matrix must be a nested list or a dim/data object")
    return a


def vectors_from_json(obj: Any) -> Array:
    """A basis: a list of vectors, or ``{"dim": n, "vectors": [...]}``."""
    if isinstance(obj, dict):
        vecs = obj.get("vectors", obj.get("data"))
        n = int(obj.get("dim", 0))
        arr = np.asarray(vecs, dtype=float)
        return arr.reshape(-1, n) if n else np.atleast_2d(arr)
    arr = np.asarray(obj, dtype=float)
    return np.atleast_2d(arr) if arr.size else arr.reshape(0, 0)


def read_universe(obj: Any) -> Universe:
    if isinstance(obj, list):
        return Universe.build(obj)
    if isinstance(obj, dict) and "instruments" in obj:
        return Universe.build(obj["instruments"], float(obj.get("rate", 0.0)))
    raise DataError("universe must be a list of instruments or an object with 'instruments'")


# ---------------------------------------------------------------------------
# bars CSV: time, <id>_price..., <id>_flow... [, <id>_iv ...]


def fmt(x: float) -> str:
    return repr(float(x))


def bars_header(ids: list[str], iv_ids: list[str] | None = None) -> list[str]:
    head = ["time"] + [f"{i}_price" for i in ids] + [f"{i}_flow" for i in ids]
    return head + [f"{i}_iv" for i in iv_ids or []]


def write_bars_csv(path: str | Path, bars: BarSeries) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(bars_header(bars.ids))
        for t, p, f in zip(bars.times, bars.prices, bars.flows):
            w.writerow([fmt(t)] + [fmt(x) for x in p] + [fmt(x) for x in f])


def read_bars_csv(path: str | Path, universe: Universe | None = None, dt: float | None = None) -> tuple[BarSeries, Array | None]:
    """Read bars (and implied-vol columns when present).

    Returns the bars and an array of per-option implied vols (or None). The bar
    width is `dt` when given, else the mean spacing of the time column.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    head, body = rows[0], rows[1:]
    if not head or head[0] != "time":
        raise ColumnMismatch("first column must be 'time'")
    price_ids = [h[: -len("_price")] for h in head if h.endswith("_price")]
    flow_ids = [h[: -len("_flow")] for h in head if h.endswith("_flow")]
    iv_ids = [h[: -len("_iv")] for h in head if h.endswith("_iv")]
    if price_ids != flow_ids:
        raise ColumnMismatch("price and flow columns must list the same instruments in the same order")
    if head != bars_header(price_ids, iv_ids):
        raise ColumnMismatch("columns must be time, all prices, all flows, then optional implied vols")
    if universe is not None:
        if price_ids != universe.ids:
            raise ColumnMismatch(f"CSV instruments {price_ids} do not match universe {universe.ids}")
        options = [d.id for d in universe.derivatives if d.is_option]
        if iv_ids and iv_ids != options:
            raise ColumnMismatch("implied-vol columns must cover every option in universe order")
    try:
        data = np.array([[float(x) for x in r] for r in body if r], dtype=float).reshape(-1, len(head))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    d = len(price_ids)
    times = data[:, 0]
    if dt is None:
        if times.size < 2:
            raise DataError("cannot infer the bar width from fewer than two rows")
        dt = float((times[-1] - times[0]) / (times.size - 1))
    bars = BarSeries(times, data[:, 1 : 1 + d], data[:, 1 + d : 1 + 2 * d], price_ids, float(dt))
    vols = data[:, 1 + 2 * d :] if iv_ids else None
    return bars, vols
