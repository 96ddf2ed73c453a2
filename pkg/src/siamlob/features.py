"""Model inputs: OFI vectors, capped mid-price labels, windows and walk-forward splits."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .lob import N_LEVELS, InstrumentSeries, LobSnapshot, TradingDay

LABEL_CAP = 1.0
DAYS_PER_WEEK = 5
VALID_WEEKS, TRAIN_WEEKS, TEST_WEEKS = 1, 5, 1
WEEKS_PER_WINDOW = VALID_WEEKS + TRAIN_WEEKS + TEST_WEEKS


class FeatureKind(str, enum.Enum):
    LOB = "LOB"
    OFI = "OFI"

    @property
    def width(self) -> int:
        return 4 * N_LEVELS if self is FeatureKind.LOB else 2 * N_LEVELS

    @property
    def side_width(self) -> int:
        return self.width // 2

    @classmethod
    def parse(cls, value: str) -> "FeatureKind":
        try:
            return cls(value.upper())
        except ValueError:
            raise ValueError(f"unknown feature kind {value!r}") from None


@dataclass(frozen=True)
class OfiState:
    bof: np.ndarray
    aof: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.bof, self.aof])


def mid_price(s: LobSnapshot) -> float:
    return (s.ask_prices[0] + s.bid_prices[0]) / 2.0


def order_flows(prev_bp, prev_bv, cur_bp, cur_bv, prev_ap, prev_av, cur_ap, cur_av) -> tuple[np.ndarray, np.ndarray]:
    """Per-tier bid and ask order flows; works elementwise on any matching shapes."""
    bof = np.where(cur_bp > prev_bp, cur_bv, np.where(cur_bp < prev_bp, -cur_bv, cur_bv - prev_bv))
    aof = np.where(cur_ap > prev_ap, -cur_av, np.where(cur_ap < prev_ap, cur_av, cur_av - prev_av))
    return bof, aof


def compute_of(prev: LobSnapshot, curr: LobSnapshot) -> OfiState:
    if curr.tick_index != prev.tick_index + 1:
        raise ValueError(f"snapshots are not consecutive (ticks {prev.tick_index} -> {curr.tick_index})")
    bof, aof = order_flows(
        prev.bid_prices, prev.bid_volumes, curr.bid_prices, curr.bid_volumes,
        prev.ask_prices, prev.ask_volumes, curr.ask_prices, curr.ask_volumes,
    )
    return OfiState(bof.astype(np.float64), aof.astype(np.float64))


def ofi_matrix(day: TradingDay) -> np.ndarray:
    """``(T-1, 20)`` OFI rows ``bOF (+) aOF``; row ``j`` belongs to tick ``j + 1``."""
    bof, aof = order_flows(
        day.bid_prices[:-1], day.bid_volumes[:-1], day.bid_prices[1:], day.bid_volumes[1:],
        day.ask_prices[:-1], day.ask_volumes[:-1], day.ask_prices[1:], day.ask_volumes[1:],
    )
    return np.concatenate([bof, aof], axis=1)


def normalize_day(day: TradingDay) -> TradingDay:
    """Subtract the previous close from every price field."""
    c = day.prev_close
    return replace(
        day,
        ask_prices=day.ask_prices - c,
        bid_prices=day.bid_prices - c,
        ask_volumes=day.ask_volumes.copy(),
        bid_volumes=day.bid_volumes.copy(),
        tick_index=np.array(day.tick_index),
    )


def make_label(mids: Sequence[float], k: int, h: int) -> float:
    mids = np.asarray(mids, dtype=np.float64)
    if h < 1:
        raise ValueError("horizon must be at least 1")
    if k < 0 or k + h >= len(mids):
        raise IndexError(f"anchor {k} with horizon {h} needs ticks up to {k + h}, series has {len(mids)}")
    r = mids[k + 1:k + h + 1].mean() - mids[k]
    return float(np.clip(r, -LABEL_CAP, LABEL_CAP))


def day_labels(mids: np.ndarray, h: int) -> np.ndarray:
    """Capped label for every anchor ``k`` in ``0 .. T-h-1``."""
    future = sliding_window_view(mids[1:], h).mean(axis=1)
    return np.clip(future - mids[: len(future)], -LABEL_CAP, LABEL_CAP)


@dataclass(frozen=True)
class Sample:
    inputs: np.ndarray
    target: float
    instrument_id: str
    day: int
    anchor: int
    horizon: int


def volume_columns(kind: FeatureKind) -> np.ndarray:
    if kind is FeatureKind.LOB:
        cols = np.arange(kind.width)
        return cols[(cols % 4 == 1) | (cols % 4 == 3)]
    return np.arange(kind.width)


@dataclass
class SampleSet:
    """Windows gathered on demand from stacked per-tick rows.

    ``rows`` holds the feature rows of every day back to back; sample ``i`` is
    ``rows[ends[i] - delta : ends[i] + 1]``, optionally standardised with
    ``(x - shift) / scale``.
    """

    kind: FeatureKind
    delta: int
    horizon: int
    rows: np.ndarray
    ends: np.ndarray
    targets: np.ndarray
    day_index: np.ndarray
    anchor: np.ndarray
    instrument_id: str = ""
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    row_days: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.ends)

    @property
    def seq_len(self) -> int:
        return self.delta + 1

    def inputs(self, idx=None) -> np.ndarray:
        ends = self.ends if idx is None else self.ends[idx]
        window = np.arange(-self.delta, 1)
        x = self.rows[np.asarray(ends)[:, None] + window[None, :]]
        if self.shift is not None:
            x = (x - self.shift) / self.scale
        return x

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            self.inputs([i])[0], float(self.targets[i]), self.instrument_id,
            int(self.day_index[i]), int(self.anchor[i]), self.horizon,
        )

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SampleSet":
        if not isinstance(idx, slice):
            idx = np.asarray(idx)
            if idx.dtype != bool:
                idx = idx.astype(np.int64)
        return replace(self, ends=self.ends[idx], targets=self.targets[idx],
                       day_index=self.day_index[idx], anchor=self.anchor[idx])

    def fit_scaling(self, columns: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-column mean and std over every row of this set's days."""
        cols = volume_columns(self.kind) if columns is None else columns
        rows = self.rows
        shift = np.zeros(rows.shape[1])
        scale = np.ones(rows.shape[1])
        shift[cols] = rows[:, cols].mean(axis=0)
        sd = rows[:, cols].std(axis=0)
        scale[cols] = np.where(sd > 0, sd, 1.0)
        return shift, scale

    def with_scaling(self, shift: np.ndarray, scale: np.ndarray) -> "SampleSet":
        return replace(self, shift=shift, scale=scale)


def _day_rows(day: TradingDay, kind: FeatureKind) -> tuple[np.ndarray, int]:
    """Feature rows of one day and the tick index of the first row."""
    if kind is FeatureKind.LOB:
        return normalize_day(day).lob_matrix(), 0
    return ofi_matrix(day), 1


def build_windows(series: InstrumentSeries, kind: FeatureKind, delta: int, horizon: int,
                  days: Sequence[int] | None = None, stride: int = 1) -> SampleSet:
    """All windows of ``delta + 1`` ticks whose label horizon stays inside the day.

    ``days`` restricts to a subset of day indices; ``stride`` keeps every
    ``stride``-th valid anchor of each day.
    """
    if delta < 0 or horizon < 1 or stride < 1:
        raise ValueError("need delta >= 0, horizon >= 1, stride >= 1")
    day_ids = range(len(series.days)) if days is None else days
    rows, ends, targets, day_col, anchors, row_days = [], [], [], [], [], []
    offset = 0
    for d in day_ids:
        day = series.days[d]
        T = len(day)
        if T < 2:
            continue
        r, first_tick = _day_rows(day, kind)
        first_anchor = first_tick + delta
        last_anchor = T - horizon - 1
        if last_anchor >= first_anchor:
            k = np.arange(first_anchor, last_anchor + 1, stride)
            labels = day_labels(day.mids, horizon)[k]
            ends.append(offset + k - first_tick)
            targets.append(labels)
            day_col.append(np.full(len(k), d))
            anchors.append(k)
        rows.append(r)
        row_days.append(np.full(len(r), d))
        offset += len(r)

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    return SampleSet(
        kind=kind, delta=delta, horizon=horizon,
        rows=np.concatenate(rows) if rows else np.zeros((0, kind.width)),
        ends=cat(ends, np.int64), targets=cat(targets, np.float64),
        day_index=cat(day_col, np.int64), anchor=cat(anchors, np.int64),
        instrument_id=series.instrument_id, row_days=cat(row_days, np.int64),
    )


def side_columns(kind: FeatureKind) -> tuple[np.ndarray, np.ndarray]:
    """Column indices of the ask side and the bid side within a full row."""
    cols = np.arange(kind.width)
    if kind is FeatureKind.LOB:
        return cols[cols % 4 < 2], cols[cols % 4 >= 2]
    return cols[N_LEVELS:], cols[:N_LEVELS]


def split_sides_array(x: np.ndarray, kind: FeatureKind) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[-1] != kind.width:
        raise ValueError(f"expected {kind.width} columns for {kind.value}, got {x.shape[-1]}")
    ask, bid = side_columns(kind)
    return x[..., ask], x[..., bid]


def split_sides(sample: Sample | np.ndarray, kind: FeatureKind) -> tuple[np.ndarray, np.ndarray]:
    x = sample.inputs if isinstance(sample, Sample) else sample
    return split_sides_array(np.asarray(x), kind)


def reassemble_sides(ask: np.ndarray, bid: np.ndarray, kind: FeatureKind) -> np.ndarray:
    ask_cols, bid_cols = side_columns(kind)
    out = np.empty(ask.shape[:-1] + (kind.width,))
    out[..., ask_cols] = ask
    out[..., bid_cols] = bid
    return out


@dataclass(frozen=True)
class DatasetSplit:
    ordinal: int
    valid_days: tuple[int, ...]
    train_days: tuple[int, ...]
    test_days: tuple[int, ...]

    @property
    def train_weeks(self) -> list[tuple[int, ...]]:
        d = self.train_days
        return [d[i:i + DAYS_PER_WEEK] for i in range(0, len(d), DAYS_PER_WEEK)]


def rolling_splits(series: InstrumentSeries | int) -> list[DatasetSplit]:
    """Weekly walk-forward windows: 1 validation week, 5 training weeks, 1 test week."""
    n_days = series if isinstance(series, int) else len(series.days)
    n_weeks = n_days // DAYS_PER_WEEK

    def week(w: int) -> tuple[int, ...]:
        return tuple(range(w * DAYS_PER_WEEK, (w + 1) * DAYS_PER_WEEK))

    splits = []
    for w in range(n_weeks - WEEKS_PER_WINDOW + 1):
        train = tuple(d for i in range(1, 1 + TRAIN_WEEKS) for d in week(w + i))
        splits.append(DatasetSplit(w, week(w), train, week(w + WEEKS_PER_WINDOW - 1)))
    return splits


def split_sample_sets(series: InstrumentSeries, split: DatasetSplit, kind: FeatureKind, delta: int,
                      horizon: int, stride: int = 1, scale_ofi: bool = False) -> dict[str, SampleSet]:
    """Valid/train/test sets of one split, standardised with training-week statistics.

    LOB volume columns are always standardised; OFI columns only when ``scale_ofi``.
    """
    parts = {
        "valid": build_windows(series, kind, delta, horizon, split.valid_days, stride),
        "train": build_windows(series, kind, delta, horizon, split.train_days, stride),
        "test": build_windows(series, kind, delta, horizon, split.test_days, stride),
    }
    if kind is FeatureKind.LOB or scale_ofi:
        shift, scale = parts["train"].fit_scaling()
        parts = {k: v.with_scaling(shift, scale) for k, v in parts.items()}
    return parts


def save_sample_set(samples: SampleSet, path: str | Path, **meta) -> None:
    """Write ``<path>.bin`` (inputs then targets, row-major float64) and ``<path>.json``."""
    path = Path(path)
    x = np.ascontiguousarray(samples.inputs(), dtype="<f8")
    y = np.ascontiguousarray(samples.targets, dtype="<f8")
    path.with_suffix(".bin").write_bytes(x.tobytes() + y.tobytes())
    manifest = {
        "schema_version": 1,
        "shape": list(x.shape),
        "kind": samples.kind.value,
        "delta": samples.delta,
        "horizon": samples.horizon,
        "instrument": samples.instrument_id,
        "day_index": samples.day_index.tolist(),
        "anchor": samples.anchor.tolist(),
        **meta,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_sample_set(path: str | Path) -> SampleSet:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    n, seq_len, width = manifest["shape"]
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    x = blob[: n * seq_len * width].reshape(n * seq_len, width).astype(np.float64)
    y = blob[n * seq_len * width:].astype(np.float64)
    return SampleSet(
        kind=FeatureKind(manifest["kind"]), delta=manifest["delta"], horizon=manifest["horizon"],
        rows=x, ends=np.arange(n, dtype=np.int64) * seq_len + seq_len - 1, targets=y,
        day_index=np.asarray(manifest["day_index"], dtype=np.int64),
        anchor=np.asarray(manifest["anchor"], dtype=np.int64),
        instrument_id=manifest["instrument"],
    )
