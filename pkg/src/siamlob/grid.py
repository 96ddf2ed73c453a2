"""Experiment grid: data preparation, per-cell training/evaluation and reporting.

Results live under the configured output directory::

    data/<instrument>.csv                      input series (synthetic unless data_dir is set)
    features/<instrument>/split<k>/...         cached sample sets (``featurize``)
    cells/<instrument>/split<k>/h<h>/<feature>/<arch>-<plain|siamese>/
        checkpoint.bin  history.json  record.json
    volatility/<instrument>-split<k>-h<h>-<feature>.json
    report/                                    metrics.csv, ranks.json, ...
    manifest.json
"""

from __future__ import annotations

import json
import logging
import platform
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import ExperimentConfig
from .evaluation import (
    EvalRecord, IncompleteGridError, VolatilityStats, build_report, mae_mse, r2_os, volatility_stats,
)
from .features import FeatureKind, SampleSet, rolling_splits, save_sample_set, split_sample_sets
from .lob import InstrumentSeries, read_lob_csv, write_lob_csv
from .models import Architecture, build_model
from .synth import synth_generate
from .training import History, predict, train

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class Cell:
    instrument: str
    split: int
    horizon: int
    feature: str
    arch: str
    siamese: bool

    @property
    def relpath(self) -> Path:
        variant = "siamese" if self.siamese else "plain"
        return Path(self.instrument, f"split{self.split}", f"h{self.horizon}", self.feature, f"{self.arch}-{variant}")

    @property
    def dataset(self) -> tuple[str, int, int, str]:
        return (self.instrument, self.split, self.horizon, self.feature)


@dataclass(frozen=True)
class CellFailure:
    cell: Cell
    message: str
    numerical: bool  # non-finite loss or other arithmetic failure


class GridFailure(IncompleteGridError):
    def __init__(self, failures: list[CellFailure]):
        super().__init__(f"{len(failures)} cell(s) failed; first: {failures[0].message}")
        self.failures = failures

    @property
    def numerical(self) -> bool:
        return any(f.numerical for f in self.failures)


def instrument_seed(seed: int, instrument: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(instrument.encode())]).generate_state(1)[0])


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data_dir) if cfg.data_dir else Path(cfg.out) / "data"


def generate_data(cfg: ExperimentConfig, force: bool = False) -> list[Path]:
    """Write one synthetic CSV per instrument (skipped when present unless ``force``)."""
    out = Path(cfg.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for inst in cfg.instruments:
        p = out / f"{inst}.csv"
        if force or not p.exists():
            write_lob_csv(synth_generate(cfg.synth, instrument_seed(cfg.seed, inst), inst), p)
        paths.append(p)
    return paths


def load_series(cfg: ExperimentConfig, instrument: str) -> InstrumentSeries:
    path = data_dir(cfg) / f"{instrument}.csv"
    if not path.exists():
        if cfg.data_dir:
            raise FileNotFoundError(f"no data file for {instrument} at {path}")
        generate_data(cfg)
    return read_lob_csv(path, instrument)


def grid_cells(cfg: ExperimentConfig, splits: dict[str, int]) -> list[Cell]:
    cells = []
    for inst in cfg.instruments:
        n = splits[inst] if not cfg.max_splits else min(splits[inst], cfg.max_splits)
        for s in range(n):
            for h in cfg.horizons:
                for feat in cfg.feature_list:
                    for arch in cfg.arch_list:
                        for sia in cfg.siamese:
                            cells.append(Cell(inst, s, h, feat.value, arch.value, bool(sia)))
    return sorted(cells)


def split_counts(cfg: ExperimentConfig) -> dict[str, int]:
    return {inst: len(rolling_splits(load_series(cfg, inst))) for inst in cfg.instruments}


def write_manifest(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "package": "siamlob",
        "versions": {"siamlob": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def build_dataset(cfg: ExperimentConfig, series: InstrumentSeries, split: int, horizon: int,
                  feature: str) -> dict[str, SampleSet]:
    sp = rolling_splits(series)[split]
    return split_sample_sets(series, sp, FeatureKind.parse(feature), cfg.delta, horizon,
                             stride=cfg.stride, scale_ofi=cfg.scale_ofi)


def featurize(cfg: ExperimentConfig) -> list[Path]:
    """Cache every (instrument, split, horizon, feature) sample set as binary + JSON manifest."""
    written = []
    for inst in cfg.instruments:
        series = load_series(cfg, inst)
        n = len(rolling_splits(series))
        n = min(n, cfg.max_splits) if cfg.max_splits else n
        for s in range(n):
            for h in cfg.horizons:
                for feat in cfg.feature_list:
                    parts = build_dataset(cfg, series, s, h, feat.value)
                    base = Path(cfg.out) / "features" / inst / f"split{s}"
                    base.mkdir(parents=True, exist_ok=True)
                    for name, ss in parts.items():
                        p = base / f"{feat.value}-h{h}-{name}"
                        save_sample_set(ss, p, split=s, part=name)
                        written.append(p.with_suffix(".bin"))
    return written


def _cell_dir(cfg: ExperimentConfig, cell: Cell) -> Path:
    return Path(cfg.out) / "cells" / cell.relpath


def _vol_path(cfg: ExperimentConfig, dataset: tuple[str, int, int, str]) -> Path:
    inst, split, h, feat = dataset
    return Path(cfg.out) / "volatility" / f"{inst}-split{split}-h{h}-{feat}.json"


def _make_model(cfg: ExperimentConfig, cell: Cell, seq_len: int):
    arch = Architecture.parse(cell.arch)
    return build_model(cfg.model.encoder_spec(arch, seq_len), FeatureKind.parse(cell.feature),
                       siamese=cell.siamese, head_cfg=cfg.model.head_config(), seed=cfg.seed)


def train_cell(cfg: ExperimentConfig, cell: Cell, parts: dict[str, SampleSet]) -> History:
    model = _make_model(cfg, cell, cfg.delta + 1)
    _, history = train(model, parts["train"], parts["valid"], cfg.train)
    d = _cell_dir(cfg, cell)
    d.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(d / "checkpoint.bin", model.state_dict())
    (d / "history.json").write_text(history.to_json(include_time=False))
    return history


def evaluate_cell(cfg: ExperimentConfig, cell: Cell, parts: dict[str, SampleSet]) -> EvalRecord:
    d = _cell_dir(cfg, cell)
    model = _make_model(cfg, cell, cfg.delta + 1)
    model.load_state_dict(ad.load_checkpoint(d / "checkpoint.bin"))
    test = parts["test"]
    preds = predict(model, test)
    mae, mse = mae_mse(preds, test.targets)
    rec = EvalRecord(cell.instrument, cell.split, cell.arch, cell.feature, cell.siamese, cell.horizon,
                     mae, mse, r2_os(preds, test.targets))
    (d / "record.json").write_text(json.dumps(asdict(rec), indent=1, sort_keys=True) + "\n")
    return rec


def _record_volatility(cfg: ExperimentConfig, dataset, parts: dict[str, SampleSet]) -> None:
    p = _vol_path(cfg, dataset)
    p.parent.mkdir(parents=True, exist_ok=True)
    v = volatility_stats(parts["test"].targets)
    p.write_text(json.dumps(asdict(v), sort_keys=True) + "\n")


def _group(cells: Iterable[Cell]) -> dict[tuple, list[Cell]]:
    groups: dict[tuple, list[Cell]] = {}
    for c in sorted(cells):
        groups.setdefault(c.dataset, []).append(c)
    return groups


def _run_group(cfg: ExperimentConfig, dataset: tuple, cells: list[Cell],
               stages: tuple[str, ...]) -> list[CellFailure]:
    """Train and/or evaluate every cell sharing one dataset."""
    inst, split, h, feat = dataset
    if _vol_path(cfg, dataset).exists() and all(
        (_cell_dir(cfg, c) / ("record.json" if "evaluate" in stages else "checkpoint.bin")).exists() for c in cells
    ):
        return []
    parts = build_dataset(cfg, load_series(cfg, inst), split, h, feat)
    _record_volatility(cfg, dataset, parts)
    failures = []
    for cell in cells:
        d = _cell_dir(cfg, cell)
        try:
            if "train" in stages and not (d / "checkpoint.bin").exists():
                log.info("training %s", cell.relpath)
                train_cell(cfg, cell, parts)
            if "evaluate" in stages and not (d / "record.json").exists():
                if not (d / "checkpoint.bin").exists():
                    raise FileNotFoundError("no checkpoint; run train first")
                evaluate_cell(cfg, cell, parts)
        except Exception as exc:  # one failed cell must not stop the others
            failure = CellFailure(cell, f"{cell.relpath}: {type(exc).__name__}: {exc}",
                                  isinstance(exc, ArithmeticError))
            log.error("%s", failure.message)
            failures.append(failure)
    return failures


def run_cells(cfg: ExperimentConfig, cells: list[Cell], stages: tuple[str, ...]) -> list[CellFailure]:
    groups = _group(cells)
    if cfg.workers == 1:
        failures = []
        for ds, cs in groups.items():
            failures += _run_group(cfg, ds, cs, stages)
        return failures
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(_run_group, cfg, ds, cs, stages) for ds, cs in groups.items()]
        return [failure for f in futures for failure in f.result()]


def collect_records(cfg: ExperimentConfig, cells: Iterable[Cell]) -> tuple[list[EvalRecord], list[Cell]]:
    records, missing = [], []
    for cell in cells:
        p = _cell_dir(cfg, cell) / "record.json"
        if p.exists():
            records.append(EvalRecord(**json.loads(p.read_text())))
        else:
            missing.append(cell)
    return sorted(records), missing


def collect_volatility(cfg: ExperimentConfig, cells: Iterable[Cell]) -> dict[tuple, VolatilityStats]:
    out = {}
    for ds in sorted({c.dataset for c in cells}):
        p = _vol_path(cfg, ds)
        if p.exists():
            out[ds] = VolatilityStats(**json.loads(p.read_text()))
    return out


def report(cfg: ExperimentConfig, cells: list[Cell], allow_partial: bool = False) -> Path:
    records, missing = collect_records(cfg, cells)
    if missing and not allow_partial:
        raise IncompleteGridError(
            f"{len(missing)} of {len(cells)} cells have no result (first: {missing[0].relpath}); "
            "rerun the grid or pass --allow-partial"
        )
    out = Path(cfg.out) / "report"
    build_report(records, collect_volatility(cfg, cells), out)
    return out


def run_grid(cfg: ExperimentConfig, allow_partial: bool = False) -> Path:
    """Train and evaluate every missing cell, then write the report directory."""
    write_manifest(cfg)
    cells = grid_cells(cfg, split_counts(cfg))
    failures = run_cells(cfg, cells, ("train", "evaluate"))
    if failures and not allow_partial:
        raise GridFailure(failures)
    return report(cfg, cells, allow_partial=allow_partial)

