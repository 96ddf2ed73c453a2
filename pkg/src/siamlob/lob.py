"""Level-II limit order book snapshots: types, validation and CSV I/O.

A trading day is stored column-wise (one ``(T, 10)`` array per field) so that
feature extraction can stay vectorised; :class:`LobSnapshot` is the row view.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

N_LEVELS = 10
TICK_SIZE = 0.01
_TICK_TOL = 1e-6

CSV_HEADER = (
    ["date", "tick"]
    + [
        name
        for k in range(1, N_LEVELS + 1)
        for name in (f"a{k}", f"va{k}", f"b{k}", f"vb{k}")
    ]
    + ["prev_close"]
)


class LobError(ValueError):
    """Base class for order book data errors."""


class LobParseError(LobError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SequencingError(LobError):
    pass


class SnapshotValidationError(LobError):
    pass


class CrossedBookError(SnapshotValidationError):
    pass


class TierOrderError(SnapshotValidationError):
    pass


class NegativeVolumeError(SnapshotValidationError):
    pass


class TickSizeError(SnapshotValidationError):
    pass


@dataclass(frozen=True)
class LobSnapshot:
    tick_index: int
    ask_prices: np.ndarray
    ask_volumes: np.ndarray
    bid_prices: np.ndarray
    bid_volumes: np.ndarray

    def __post_init__(self):
        for name in ("ask_prices", "ask_volumes", "bid_prices", "bid_volumes"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (N_LEVELS,):
                raise SnapshotValidationError(f"{name} must have {N_LEVELS} tiers, got shape {arr.shape}")
            object.__setattr__(self, name, arr)

    def as_row(self) -> np.ndarray:
        """Interleaved ``(a1, va1, b1, vb1, ..., a10, va10, b10, vb10)`` vector."""
        row = np.empty(4 * N_LEVELS)
        row[0::4] = self.ask_prices
        row[1::4] = self.ask_volumes
        row[2::4] = self.bid_prices
        row[3::4] = self.bid_volumes
        return row


def _off_grid(prices: np.ndarray) -> np.ndarray:
    scaled = prices / TICK_SIZE
    return (np.abs(scaled - np.round(scaled)) > _TICK_TOL) | (prices <= 0)


def validate_snapshot(s: LobSnapshot) -> LobSnapshot:
    """Return ``s`` unchanged if the book is well formed, otherwise raise."""
    where = f"tick {s.tick_index}"
    if s.bid_prices[0] >= s.ask_prices[0]:
        raise CrossedBookError(f"{where}: crossed book (b1={s.bid_prices[0]:.2f} >= a1={s.ask_prices[0]:.2f})")
    if np.any(np.diff(s.ask_prices) <= 0):
        raise TierOrderError(f"{where}: ask prices not strictly increasing")
    if np.any(np.diff(s.bid_prices) >= 0):
        raise TierOrderError(f"{where}: bid prices not strictly decreasing")
    if np.any(s.ask_volumes < 0) or np.any(s.bid_volumes < 0):
        raise NegativeVolumeError(f"{where}: negative volume")
    if np.any(_off_grid(s.ask_prices)) or np.any(_off_grid(s.bid_prices)):
        raise TickSizeError(f"{where}: price not a positive multiple of {TICK_SIZE}")
    return s


@dataclass
class TradingDay:
    """One day of snapshots; arrays are ``(T, 10)`` with tier 1 in column 0."""

    date: dt.date
    prev_close: float
    ask_prices: np.ndarray
    ask_volumes: np.ndarray
    bid_prices: np.ndarray
    bid_volumes: np.ndarray
    tick_index: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.tick_index is None:
            self.tick_index = np.arange(len(self.ask_prices))

    def __len__(self) -> int:
        return len(self.ask_prices)

    def snapshot(self, j: int) -> LobSnapshot:
        return LobSnapshot(
            int(self.tick_index[j]),
            self.ask_prices[j],
            self.ask_volumes[j],
            self.bid_prices[j],
            self.bid_volumes[j],
        )

    @property
    def snapshots(self) -> Iterator[LobSnapshot]:
        return (self.snapshot(j) for j in range(len(self)))

    @property
    def mids(self) -> np.ndarray:
        return (self.ask_prices[:, 0] + self.bid_prices[:, 0]) / 2.0

    def lob_matrix(self) -> np.ndarray:
        """``(T, 40)`` matrix in interleaved ask/bid tier order."""
        out = np.empty((len(self), 4 * N_LEVELS))
        out[:, 0::4] = self.ask_prices
        out[:, 1::4] = self.ask_volumes
        out[:, 2::4] = self.bid_prices
        out[:, 3::4] = self.bid_volumes
        return out


@dataclass
class InstrumentSeries:
    instrument_id: str
    days: list[TradingDay]

    def __len__(self) -> int:
        return len(self.days)


def validate_day(day: TradingDay) -> TradingDay:
    """Vectorised :func:`validate_snapshot` over a whole day plus tick sequencing."""
    ticks = np.asarray(day.tick_index)
    if len(ticks) and (ticks[0] != 0 or np.any(np.diff(ticks) != 1)):
        bad = 0 if ticks[0] != 0 else int(np.argmax(np.diff(ticks) != 1)) + 1
        raise SequencingError(f"{day.date}: tick_index must run 0,1,2,... (row {bad} has {ticks[bad]})")
    checks = (
        (day.bid_prices[:, 0] >= day.ask_prices[:, 0]),
        np.any(np.diff(day.ask_prices, axis=1) <= 0, axis=1),
        np.any(np.diff(day.bid_prices, axis=1) >= 0, axis=1),
        np.any(day.ask_volumes < 0, axis=1) | np.any(day.bid_volumes < 0, axis=1),
        np.any(_off_grid(day.ask_prices), axis=1) | np.any(_off_grid(day.bid_prices), axis=1),
    )
    if any(c.any() for c in checks):
        first = min(int(np.argmax(c)) for c in checks if c.any())
        try:
            validate_snapshot(day.snapshot(first))
        except SnapshotValidationError as exc:
            raise type(exc)(f"{day.date}: {exc}") from None
    return day


def _parse_rows(reader: Iterable[list[str]]) -> Iterator[tuple[int, str, int, list[float], float]]:
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(CSV_HEADER):
            raise LobParseError(line_no, f"expected {len(CSV_HEADER)} columns, got {len(row)}")
        try:
            tick = int(row[1])
            values = [float(v) for v in row[2:-1]]
            prev_close = float(row[-1])
            dt.date.fromisoformat(row[0])
        except ValueError as exc:
            raise LobParseError(line_no, str(exc)) from None
        yield line_no, row[0], tick, values, prev_close


def parse_lob_csv(source: IO[bytes] | IO[str] | bytes | str, instrument_id: str = "") -> InstrumentSeries:
    """Parse one instrument's CSV into a validated :class:`InstrumentSeries`."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise LobParseError(1, "empty input")
    if [h.strip() for h in header] != CSV_HEADER:
        raise LobParseError(1, "unexpected header")

    grouped: dict[str, tuple[list[int], list[list[float]], float]] = {}
    order: list[str] = []
    last_tick: dict[str, tuple[int, int]] = {}
    for line_no, date, tick, values, prev_close in _parse_rows(reader):
        if date not in grouped:
            if order and date <= order[-1]:
                raise SequencingError(f"line {line_no}: date {date} is not after {order[-1]}")
            grouped[date] = ([], [], prev_close)
            order.append(date)
        elif date != order[-1]:
            raise SequencingError(f"line {line_no}: rows for {date} are not contiguous")
        if date in last_tick and tick <= last_tick[date][0]:
            raise SequencingError(
                f"line {line_no}: tick {tick} does not follow tick {last_tick[date][0]} (line {last_tick[date][1]})"
            )
        last_tick[date] = (tick, line_no)
        grouped[date][0].append(tick)
        grouped[date][1].append(values)

    days = []
    for date in order:
        ticks, rows, prev_close = grouped[date]
        m = np.asarray(rows, dtype=np.float64)
        day = TradingDay(
            date=dt.date.fromisoformat(date),
            prev_close=prev_close,
            ask_prices=m[:, 0::4].copy(),
            ask_volumes=m[:, 1::4].copy(),
            bid_prices=m[:, 2::4].copy(),
            bid_volumes=m[:, 3::4].copy(),
            tick_index=np.asarray(ticks),
        )
        days.append(validate_day(day))
    return InstrumentSeries(instrument_id, days)


def _fmt_price(p: float) -> str:
    return f"{p:.2f}"


def _fmt_volume(v: float) -> str:
    return str(int(round(v)))


def serialize_lob_csv(series: InstrumentSeries) -> str:
    """Inverse of :func:`parse_lob_csv` (prices with 2 decimals, integer volumes)."""
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for day in series.days:
        date = day.date.isoformat()
        close = _fmt_price(day.prev_close)
        m = day.lob_matrix()
        for j in range(len(day)):
            row = m[j]
            cells = [
                _fmt_price(v) if c % 2 == 0 else _fmt_volume(v)
                for c, v in enumerate(row)
            ]
            buf.write(f"{date},{int(day.tick_index[j])},{','.join(cells)},{close}\n")
    return buf.getvalue()


def write_lob_csv(series: InstrumentSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_lob_csv(series))


def read_lob_csv(path, instrument_id: str | None = None) -> InstrumentSeries:
    from pathlib import Path

    path = Path(path)
    with open(path, "rb") as fh:
        return parse_lob_csv(fh, instrument_id or path.stem)
