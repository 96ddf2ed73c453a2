"""Synthetic level-II data standing in for proprietary exchange feeds.

The reference price walks on the tick grid with per-tick moves in {-1, 0, +1}.
An optional latent order-flow factor (an AR(1) process) tilts both the move
probabilities and the top-of-book volumes, which plants a short-horizon signal
that OFI features can pick up.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .lob import N_LEVELS, TICK_SIZE, InstrumentSeries, LobError, TradingDay, validate_day

MIN_TICKS, MAX_TICKS = 4500, 5000
_SPREAD_CHOICES = np.array([1, 2, 3])
_SPREAD_PROBS = np.array([0.6, 0.3, 0.1])
_PRICE_LIMIT = 0.10


@dataclass(frozen=True)
class SynthConfig:
    n_days: int = 35
    ticks_min: int = MIN_TICKS
    ticks_max: int = MAX_TICKS
    initial_price: float = 20.00
    volatility: float = 0.3  # probability that the reference price moves on a tick
    flow_drift: float = 0.0  # strength of the planted order-flow signal, in [0, 1]
    flow_persistence: float = 0.98
    flow_volume_loading: float = 0.5
    log_volume_mean: float = 6.5
    log_volume_sd: float = 1.0
    volume_persistence: float = 0.95
    start_date: str = "2021-01-06"

    def check(self) -> None:
        if self.n_days < 1:
            raise LobError("n_days must be at least 1")
        if not (MIN_TICKS <= self.ticks_min <= self.ticks_max <= MAX_TICKS):
            raise LobError(f"ticks per day must lie within [{MIN_TICKS}, {MAX_TICKS}]")
        if not 0.0 <= self.volatility <= 1.0:
            raise LobError("volatility is a per-tick move probability in [0, 1]")
        if not 0.0 <= self.flow_drift <= 1.0:
            raise LobError("flow_drift must lie in [0, 1]")
        if not 0.0 <= self.flow_persistence < 1.0 or not 0.0 <= self.volume_persistence < 1.0:
            raise LobError("persistence parameters must lie in [0, 1)")
        if self.initial_price < 1.0:
            raise LobError("initial_price must be at least 1 CNY")


def _to_ticks(price: float) -> int:
    return int(round(price / TICK_SIZE))


def _ar1(rng: np.random.Generator, n: int, width: int, phi: float) -> np.ndarray:
    """Unit-variance stationary AR(1) paths, shape ``(n, width)``."""
    eps = rng.standard_normal((n, width)) * np.sqrt(1.0 - phi * phi)
    out = np.empty((n, width))
    prev = rng.standard_normal(width)
    for t in range(n):
        prev = phi * prev + eps[t]
        out[t] = prev
    return out


def _sticky_draws(rng: np.random.Generator, n: int, width: int, p_redraw: float, draw) -> np.ndarray:
    """Values that are re-sampled with probability ``p_redraw`` per step, held otherwise."""
    fresh = draw((n, width))
    redraw = rng.random((n, width)) < p_redraw
    redraw[0] = True
    idx = np.where(redraw, np.arange(n)[:, None], 0)
    np.maximum.accumulate(idx, axis=0, out=idx)
    return np.take_along_axis(fresh, idx, axis=0)


def _generate_day(rng: np.random.Generator, cfg: SynthConfig, date: dt.date, prev_close: float) -> TradingDay:
    n = int(rng.integers(cfg.ticks_min, cfg.ticks_max + 1))
    close_ticks = _to_ticks(prev_close)
    lo = max(int(np.ceil(close_ticks * (1 - _PRICE_LIMIT))), 2 * N_LEVELS * 2 + 4)
    hi = int(np.floor(close_ticks * (1 + _PRICE_LIMIT)))

    flow = _ar1(rng, n, 1, cfg.flow_persistence)[:, 0]
    tilt = np.clip(cfg.flow_drift * flow, -1.0, 1.0)
    u = rng.random(n)
    p_up = cfg.volatility * 0.5 * (1.0 + tilt)
    p_down = cfg.volatility * 0.5 * (1.0 - tilt)
    steps = np.where(u < p_up, 1, np.where(u < p_up + p_down, -1, 0))

    ref = np.empty(n, dtype=np.int64)
    level = int(np.clip(close_ticks + rng.integers(-2, 3), lo + 3, hi - 3))
    for t in range(n):
        nxt = level + steps[t]
        # reflect at the band edges so the deepest tiers stay inside the price limit
        if nxt < lo + 3 or nxt > hi - 3:
            nxt = level - steps[t]
        level = nxt
        ref[t] = level

    spread = _sticky_draws(rng, n, 1, 0.1, lambda shape: rng.choice(_SPREAD_CHOICES, size=shape, p=_SPREAD_PROBS))[:, 0]
    bid1 = ref - spread // 2
    ask1 = bid1 + spread

    def gaps():
        return _sticky_draws(rng, n, N_LEVELS - 1, 0.02, lambda shape: rng.choice([1, 1, 1, 2], size=shape))

    ask_ticks = ask1[:, None] + np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(gaps(), axis=1)], axis=1)
    bid_ticks = bid1[:, None] - np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(gaps(), axis=1)], axis=1)

    log_v = cfg.log_volume_mean + cfg.log_volume_sd * _ar1(rng, n, 2 * N_LEVELS, cfg.volume_persistence)
    loading = cfg.flow_volume_loading * cfg.flow_drift * flow[:, None] * np.linspace(1.0, 0.0, N_LEVELS)[None, :]
    ask_v = np.maximum(np.round(np.exp(log_v[:, :N_LEVELS] - loading) / 100.0) * 100.0, 100.0)
    bid_v = np.maximum(np.round(np.exp(log_v[:, N_LEVELS:] + loading) / 100.0) * 100.0, 100.0)

    return TradingDay(
        date=date,
        prev_close=round(prev_close, 2),
        ask_prices=np.round(ask_ticks * TICK_SIZE, 2),
        ask_volumes=ask_v,
        bid_prices=np.round(bid_ticks * TICK_SIZE, 2),
        bid_volumes=bid_v,
    )


def business_days(start: str, count: int) -> list[dt.date]:
    first = np.busday_offset(np.datetime64(start), 0, roll="forward")
    days = np.busday_offset(first, np.arange(count))
    return [d.astype(dt.date) for d in days]


def synth_generate(config: SynthConfig, seed: int, instrument_id: str = "SYN") -> InstrumentSeries:
    """Deterministic synthetic series for ``(config, seed)``."""
    config.check()
    rng = np.random.default_rng(seed)
    days = []
    prev_close = round(config.initial_price, 2)
    for date in business_days(config.start_date, config.n_days):
        day = validate_day(_generate_day(rng, config, date, prev_close))
        days.append(day)
        prev_close = round(_to_ticks(day.mids[-1]) * TICK_SIZE, 2)
    return InstrumentSeries(instrument_id, days)
