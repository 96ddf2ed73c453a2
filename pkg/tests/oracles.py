"""Independent reference implementations used by the tests."""

from __future__ import annotations

import numpy as np


def ofi_oracle(prev, curr):
    """Per-tier order flows written out as the nine (bid move, ask move) cases."""
    bof, aof = [], []
    for i in range(10):
        pb, cb = prev.bid_prices[i], curr.bid_prices[i]
        pa, ca = prev.ask_prices[i], curr.ask_prices[i]
        vb, pvb = curr.bid_volumes[i], prev.bid_volumes[i]
        va, pva = curr.ask_volumes[i], prev.ask_volumes[i]
        b_move = "up" if cb > pb else ("down" if cb < pb else "flat")
        a_move = "up" if ca > pa else ("down" if ca < pa else "flat")
        case = (b_move, a_move)
        if case == ("up", "up"):
            b, a = vb, -va
        elif case == ("up", "flat"):
            b, a = vb, va - pva
        elif case == ("up", "down"):
            b, a = vb, va
        elif case == ("flat", "up"):
            b, a = vb - pvb, -va
        elif case == ("flat", "flat"):
            b, a = vb - pvb, va - pva
        elif case == ("flat", "down"):
            b, a = vb - pvb, va
        elif case == ("down", "up"):
            b, a = -vb, -va
        elif case == ("down", "flat"):
            b, a = -vb, va - pva
        else:
            b, a = -vb, va
        bof.append(b)
        aof.append(a)
    return np.array(bof + aof, dtype=np.float64)


def random_snapshot_pair(rng: np.random.Generator):
    from siamlob.lob import LobSnapshot

    t = int(rng.integers(0, 4000))
    base_a = 10.0 + 0.01 * np.cumsum(rng.integers(1, 3, size=10))
    base_b = 10.0 - 0.01 * np.cumsum(rng.integers(1, 3, size=10))
    step_a = 0.01 * rng.integers(-1, 2, size=10)
    step_b = 0.01 * rng.integers(-1, 2, size=10)
    va0 = 100.0 * rng.integers(1, 50, size=10)
    vb0 = 100.0 * rng.integers(1, 50, size=10)
    # volumes sometimes unchanged so the flat-price branches also see zero flow
    keep = rng.random(10) < 0.3
    va1 = np.where(keep, va0, 100.0 * rng.integers(1, 50, size=10))
    vb1 = np.where(rng.random(10) < 0.3, vb0, 100.0 * rng.integers(1, 50, size=10))
    prev = LobSnapshot(t, np.round(base_a, 2), va0, np.round(base_b, 2), vb0)
    curr = LobSnapshot(t + 1, np.round(base_a + step_a, 2), va1, np.round(base_b + step_b, 2), vb1)
    return prev, curr


def brute_rank_scores(records, metric="mse"):
    """Sort every (test set, horizon) group independently; average reciprocal ranks."""
    groups = {}
    for r in records:
        groups.setdefault((r.instrument, r.split, r.horizon), []).append(r)
    recips = {}
    for (_, _, h), rs in groups.items():
        vals = [getattr(r, metric) for r in rs]
        for r in rs:
            v = getattr(r, metric)
            below = sum(1 for x in vals if x < v)
            tied = sum(1 for x in vals if x == v)
            rank = below + (tied + 1) / 2.0  # mean of positions below+1 .. below+tied
            recips.setdefault((r.arch, r.feature, r.siamese, h), []).append(1.0 / rank)
    return {k: sum(v) / len(v) for k, v in recips.items()}


def normal_equation_fit(xs, ys):
    """Solve [[n, Sx], [Sx, Sxx]] [b, m]^T = [Sy, Sxy]^T by Cramer's rule."""
    n = float(len(xs))
    sx, sy = float(np.sum(xs)), float(np.sum(ys))
    sxx, sxy = float(np.dot(xs, xs)), float(np.dot(xs, ys))
    det = n * sxx - sx * sx
    intercept = (sy * sxx - sx * sxy) / det
    slope = (n * sxy - sx * sy) / det
    return slope, intercept
