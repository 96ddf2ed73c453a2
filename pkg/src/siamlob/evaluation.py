"""Forecast metrics, grid-wide rankings, pairwise comparisons and report files."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
METRICS_COLUMNS = ["instrument", "split", "arch", "feature", "siamese", "horizon", "mae", "mse", "r2"]
VOLATILITY_COLUMNS = ["instrument", "split", "horizon", "feature", "n", "ac", "std"]


class UndefinedResultError(ArithmeticError):
    pass


class SingularError(ArithmeticError):
    pass


class IncompleteGridError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class EvalRecord:
    instrument: str
    split: int
    arch: str
    feature: str
    siamese: bool
    horizon: int
    mae: float
    mse: float
    r2: float

    @property
    def test_set(self) -> tuple[str, int]:
        return (self.instrument, self.split)

    @property
    def combination(self) -> tuple[str, str, bool]:
        return (self.arch, self.feature, self.siamese)


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    points: int


@dataclass(frozen=True)
class VolatilityStats:
    ac: float
    std: float
    n: int = 0


@dataclass
class RankTable:
    metric: str
    scores: dict[tuple[str, str, bool, int], float]
    ranks: dict[tuple[str, int, int, str, str, bool], float]
    n_test_sets: dict[int, int]
    combinations: int

    def score(self, arch: str, feature: str, siamese: bool, horizon: int) -> float:
        return self.scores[(arch, feature, siamese, horizon)]


def _pair(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} targets")
    if p.size == 0:
        raise ValueError("no samples")
    return p, y


def mae_mse(preds, targets) -> tuple[float, float]:
    p, y = _pair(preds, targets)
    err = y - p
    return float(np.mean(np.abs(err))), float(np.mean(err * err))


def r2_os(preds, targets) -> float:
    """Out-of-sample R^2 against the test-set mean target as benchmark."""
    p, y = _pair(preds, targets)
    bench = float(np.mean((y - y.mean()) ** 2))
    if bench == 0.0:
        raise UndefinedResultError("targets are constant; benchmark MSE is zero")
    return 1.0 - float(np.mean((y - p) ** 2)) / bench


def volatility_stats(labels) -> VolatilityStats:
    p = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("no labels")
    dev = p - p.mean()
    return VolatilityStats(float(np.mean(np.abs(dev))), float(np.sqrt(np.mean(dev * dev))), int(p.size))


def ols_fit(xs, ys) -> RegressionResult:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("xs and ys differ in length")
    if x.size < 2:
        raise SingularError("need at least two points")
    dx = x - x.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise SingularError("explanatory values are all equal")
    slope = float(np.dot(dx, y - y.mean())) / sxx
    return RegressionResult(slope, float(y.mean() - slope * x.mean()), int(x.size))


def win_counts(a: Sequence[float], b: Sequence[float]) -> tuple[int, int]:
    """Number of paired test sets where ``a`` (resp. ``b``) has the strictly lower MAE."""
    if len(a) != len(b):
        raise ValueError("paired lists differ in length")
    aa, bb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return int(np.sum(aa < bb)), int(np.sum(bb < aa))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ascending ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_scores(records: Iterable[EvalRecord], metric: str = "mse") -> RankTable:
    """Mean reciprocal rank per combination and horizon across all test sets."""
    if metric not in ("mse", "mae"):
        raise ValueError(f"unsupported ranking metric {metric!r}")
    groups: dict[tuple[str, int, int], dict[tuple[str, str, bool], float]] = defaultdict(dict)
    for r in sorted(records):
        groups[(r.instrument, r.split, r.horizon)][r.combination] = getattr(r, metric)
    if not groups:
        raise IncompleteGridError("no records")
    combos_by_h: dict[int, set] = defaultdict(set)
    for (_, _, h), cells in groups.items():
        combos_by_h[h] |= set(cells)
    recip: dict[tuple[str, str, bool, int], list[float]] = defaultdict(list)
    ranks = {}
    for key in sorted(groups):
        inst, split, h = key
        cells = groups[key]
        missing = sorted(combos_by_h[h] - set(cells))
        if missing:
            arch, feat, sia = missing[0]
            raise IncompleteGridError(
                f"test set {inst}/split {split}/h={h} lacks combination arch={arch} feature={feat} siamese={sia}"
            )
        combos = sorted(cells)
        rk = average_ranks([cells[c] for c in combos])
        for c, r in zip(combos, rk):
            ranks[(inst, split, h) + c] = float(r)
            recip[c + (h,)].append(1.0 / r)
    scores = {k: float(np.mean(v)) for k, v in recip.items()}
    n_sets = defaultdict(int)
    for _, _, h in groups:
        n_sets[h] += 1
    n_combos = max(len(c) for c in combos_by_h.values())
    return RankTable(metric, scores, ranks, dict(n_sets), n_combos)


# -- grid comparisons ----------------------------------------------------------------

_KEY_FIELDS = ("instrument", "split", "arch", "feature", "siamese", "horizon")


def _index(records: Iterable[EvalRecord]) -> dict[tuple, EvalRecord]:
    return {tuple(getattr(r, k) for k in _KEY_FIELDS): r for r in records}


def _paired(records: Sequence[EvalRecord], fixed: dict, axis: str, left, right, metric: str):
    """Metric values of the ``left`` and ``right`` settings of ``axis`` over shared test sets."""
    idx = _index(records)
    xs, ys = [], []
    for inst, split in sorted({r.test_set for r in records}):
        base = dict(fixed, instrument=inst, split=split)
        a = idx.get(tuple({**base, axis: left}[k] for k in _KEY_FIELDS))
        b = idx.get(tuple({**base, axis: right}[k] for k in _KEY_FIELDS))
        if a is not None and b is not None:
            xs.append(getattr(a, metric))
            ys.append(getattr(b, metric))
    return xs, ys


def _axes(records: Sequence[EvalRecord]):
    archs = sorted({r.arch for r in records})
    feats = sorted({r.feature for r in records})
    sias = sorted({r.siamese for r in records})
    hs = sorted({r.horizon for r in records})
    return archs, feats, sias, hs


def comparison_wins(records: Sequence[EvalRecord]) -> dict:
    """Win counts on test-set MAE: LOB vs OFI per method, original vs Siamese per feature."""
    archs, feats, sias, hs = _axes(records)
    feature_rows, siamese_rows = [], []
    for h in hs:
        for arch in archs:
            if {"LOB", "OFI"} <= set(feats):
                for sia in sias:
                    a, b = _paired(records, dict(arch=arch, siamese=sia, horizon=h), "feature", "LOB", "OFI", "mae")
                    wa, wb = win_counts(a, b)
                    feature_rows.append({"horizon": h, "arch": arch, "siamese": sia,
                                         "lob_wins": wa, "ofi_wins": wb, "test_sets": len(a)})
            if {False, True} <= set(sias):
                for feat in feats:
                    a, b = _paired(records, dict(arch=arch, feature=feat, horizon=h), "siamese", False, True, "mae")
                    wa, wb = win_counts(a, b)
                    siamese_rows.append({"horizon": h, "arch": arch, "feature": feat,
                                         "original_wins": wa, "siamese_wins": wb, "test_sets": len(a)})
    return {"schema_version": SCHEMA_VERSION, "lob_vs_ofi": feature_rows, "original_vs_siamese": siamese_rows}


def _fit_entry(xs, ys, **labels) -> dict:
    entry = dict(labels, points=len(xs))
    try:
        fit = ols_fit(xs, ys)
        entry.update(slope=fit.slope, intercept=fit.intercept)
    except SingularError as exc:
        entry.update(slope=None, intercept=None, note=str(exc))
    return entry


def regression_diagnostics(records: Sequence[EvalRecord],
                           volatility: dict[tuple[str, int, int, str], VolatilityStats]) -> dict:
    """OLS slope/intercept tables over per-test-set values.

    ``lob_vs_ofi`` regresses OFI results on LOB results, ``original_vs_siamese``
    Siamese on original, ``volatility`` the architecture-averaged metric on the
    test-set label AC / std.
    """
    records = sorted(records)  # fixed summation order
    archs, feats, sias, hs = _axes(records)
    out: dict = {"schema_version": SCHEMA_VERSION, "lob_vs_ofi": [], "original_vs_siamese": [], "volatility": []}
    for h in hs:
        for metric in ("mae", "r2"):
            for arch in archs:
                if {"LOB", "OFI"} <= set(feats):
                    for sia in sias:
                        xs, ys = _paired(records, dict(arch=arch, siamese=sia, horizon=h), "feature", "LOB", "OFI", metric)
                        out["lob_vs_ofi"].append(_fit_entry(xs, ys, horizon=h, metric=metric, arch=arch, siamese=sia))
                if {False, True} <= set(sias):
                    for feat in feats:
                        xs, ys = _paired(records, dict(arch=arch, feature=feat, horizon=h), "siamese", False, True, metric)
                        out["original_vs_siamese"].append(_fit_entry(xs, ys, horizon=h, metric=metric, arch=arch, feature=feat))
            for feat in feats:
                for sia in sias:
                    per_set: dict[tuple[str, int], list[float]] = defaultdict(list)
                    for r in records:
                        if r.horizon == h and r.feature == feat and r.siamese == sia:
                            per_set[r.test_set].append(getattr(r, metric))
                    for stat in ("ac", "std"):
                        xs, ys = [], []
                        for ts in sorted(per_set):
                            vol = volatility.get((ts[0], ts[1], h, feat))
                            if vol is not None:
                                xs.append(getattr(vol, stat))
                                ys.append(float(np.mean(per_set[ts])))
                        out["volatility"].append(_fit_entry(xs, ys, horizon=h, metric=metric, feature=feat,
                                                            siamese=sia, statistic=stat))
    return out


def horizon_summary(records: Sequence[EvalRecord], table: RankTable | None = None) -> dict[int, list[dict]]:
    """Per-horizon rows of metrics averaged over test sets (plot-ready)."""
    records = sorted(records)
    acc: dict[tuple, list[EvalRecord]] = defaultdict(list)
    for r in records:
        acc[(r.horizon, r.arch, r.feature, r.siamese)].append(r)
    out: dict[int, list[dict]] = defaultdict(list)
    for (h, arch, feat, sia), rs in sorted(acc.items()):
        row = {
            "arch": arch, "feature": feat, "siamese": sia, "test_sets": len(rs),
            "mae": float(np.mean([r.mae for r in rs])),
            "mse": float(np.mean([r.mse for r in rs])),
            "r2": float(np.mean([r.r2 for r in rs])),
        }
        if table is not None:
            row["score"] = table.scores.get((arch, feat, sia, h), float("nan"))
        out[h].append(row)
    return dict(out)


# -- report files -------------------------------------------------------------------

def _num(x: float) -> str:
    return repr(float(x))


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def metrics_csv(records: Iterable[EvalRecord]) -> str:
    return _csv_text(METRICS_COLUMNS, (
        [r.instrument, r.split, r.arch, r.feature, int(r.siamese), r.horizon, _num(r.mae), _num(r.mse), _num(r.r2)]
        for r in sorted(records)
    ))


def parse_metrics_csv(text: str) -> list[EvalRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        EvalRecord(r["instrument"], int(r["split"]), r["arch"], r["feature"], bool(int(r["siamese"])),
                   int(r["horizon"]), float(r["mae"]), float(r["mse"]), float(r["r2"]))
        for r in rows
    ]


def volatility_csv(volatility: dict[tuple[str, int, int, str], VolatilityStats]) -> str:
    return _csv_text(VOLATILITY_COLUMNS, (
        [inst, split, h, feat, v.n, _num(v.ac), _num(v.std)]
        for (inst, split, h, feat), v in sorted(volatility.items())
    ))


def parse_volatility_csv(text: str) -> dict[tuple[str, int, int, str], VolatilityStats]:
    return {
        (r["instrument"], int(r["split"]), int(r["horizon"]), r["feature"]):
            VolatilityStats(float(r["ac"]), float(r["std"]), int(r["n"]))
        for r in csv.DictReader(io.StringIO(text))
    }


def ranks_json(table: RankTable) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "metric": table.metric,
        "combinations": table.combinations,
        "n_test_sets": {str(h): n for h, n in sorted(table.n_test_sets.items())},
        "scores": [
            {"arch": a, "feature": f, "siamese": s, "horizon": h, "score": v}
            for (a, f, s, h), v in sorted(table.scores.items())
        ],
        "ranks": [
            {"instrument": i, "split": sp, "horizon": h, "arch": a, "feature": f, "siamese": s, "rank": v}
            for (i, sp, h, a, f, s), v in sorted(table.ranks.items())
        ],
    }


def parse_ranks_json(obj: dict) -> RankTable:
    return RankTable(
        metric=obj["metric"],
        scores={(d["arch"], d["feature"], d["siamese"], d["horizon"]): d["score"] for d in obj["scores"]},
        ranks={(d["instrument"], d["split"], d["horizon"], d["arch"], d["feature"], d["siamese"]): d["rank"]
               for d in obj["ranks"]},
        n_test_sets={int(h): n for h, n in obj["n_test_sets"].items()},
        combinations=obj["combinations"],
    )


def emit_report(records: Sequence[EvalRecord], table: RankTable, regressions: dict,
                volatility: dict[tuple[str, int, int, str], VolatilityStats], path: str | Path,
                wins: dict | None = None) -> list[Path]:
    """Write the report files under ``path``; all content is rendered before anything is written."""
    if not records:
        raise IncompleteGridError("empty grid; nothing to report")
    files: dict[str, str] = {
        "metrics.csv": metrics_csv(records),
        "ranks.json": _json_text(ranks_json(table)),
        "regressions.json": _json_text(regressions),
        "volatility.csv": volatility_csv(volatility),
    }
    if wins is not None:
        files["wins.json"] = _json_text(wins)
    for h, rows in sorted(horizon_summary(records, table).items()):
        header = ["arch", "feature", "siamese", "test_sets", "mae", "mse", "r2", "score"]
        files[f"horizon_{h}.csv"] = _csv_text(header, (
            [r["arch"], r["feature"], int(r["siamese"]), r["test_sets"], _num(r["mae"]), _num(r["mse"]),
             _num(r["r2"]), _num(r["score"])] for r in rows
        ))
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written


def build_report(records: Sequence[EvalRecord], volatility: dict[tuple[str, int, int, str], VolatilityStats],
                 path: str | Path) -> list[Path]:
    """Rank, compare and regress a finished grid, then emit every report file."""
    if not records:
        raise IncompleteGridError("empty grid; nothing to report")
    table = rank_scores(records, "mse")
    return emit_report(records, table, regression_diagnostics(records, volatility), volatility, path,
                       wins=comparison_wins(records))
