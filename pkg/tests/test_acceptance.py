"""Acceptance suite: nine criteria, each reported as one PASS/FAIL line in the summary.

Runtime is dominated by criterion 8 (two full 60-cell grid runs) and 7.
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from siamlob import autodiff as ad
from siamlob import training
from siamlob.config import config_from_dict
from siamlob.evaluation import EvalRecord, mae_mse, ols_fit, r2_os, rank_scores, volatility_stats
from siamlob.features import FeatureKind, build_windows, compute_of, rolling_splits, split_sample_sets
from siamlob.gradcheck import MODEL_TOL, PRIMITIVE_TOL, check_architectures, check_primitives
from siamlob.lob import LobSnapshot
from siamlob.models import Architecture, EncoderSpec, build_model, siamese_forward
from siamlob.synth import SynthConfig, synth_generate
from siamlob.training import TrainConfig, evaluate_split, predict, train
from siamlob import grid

from oracles import brute_rank_scores, normal_equation_fit, ofi_oracle


# -- 1 -------------------------------------------------------------------------------

@pytest.mark.acceptance(1, "gradient fidelity (primitives < 1e-6, architectures < 1e-4, < 2 min)")
def test_gradient_fidelity():
    t0 = time.perf_counter()
    prims = check_primitives()
    archs = check_architectures()
    elapsed = time.perf_counter() - t0
    print(f"primitives worst {max(prims.values()):.2e}; " + ", ".join(f"{k} {v:.2e}" for k, v in archs.items()))
    assert max(prims.values()) < PRIMITIVE_TOL, prims
    assert len(archs) == 5 and max(archs.values()) < MODEL_TOL, archs
    assert elapsed < 120, elapsed


# -- 2 -------------------------------------------------------------------------------

def _random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    a0 = 1000 + np.cumsum(rng.integers(1, 3, size=(n, 10)), axis=1)
    b0 = 1000 - np.cumsum(rng.integers(1, 3, size=(n, 10)), axis=1)
    a1 = a0 + rng.integers(-1, 2, size=(n, 10))
    b1 = b0 + rng.integers(-1, 2, size=(n, 10))
    vols = 100.0 * rng.integers(1, 50, size=(4, n, 10))
    same = rng.random((2, n, 10)) < 0.3
    va1 = np.where(same[0], vols[0], vols[2])
    vb1 = np.where(same[1], vols[1], vols[3])
    ticks = rng.integers(0, 4000, size=n)
    for j in range(n):
        yield (LobSnapshot(int(ticks[j]), a0[j] / 100, vols[0, j], b0[j] / 100, vols[1, j]),
               LobSnapshot(int(ticks[j]) + 1, a1[j] / 100, va1[j], b1[j] / 100, vb1[j]))


@pytest.mark.acceptance(2, "OFI equals the 9-case oracle on 1e5 random pairs (< 10 s)")
def test_ofi_oracle_equivalence():
    pairs = list(_random_pairs(100_000))
    t0 = time.perf_counter()
    got = [compute_of(prev, curr).as_vector() for prev, curr in pairs]
    elapsed = time.perf_counter() - t0
    mismatches = sum(not np.array_equal(g, ofi_oracle(p, c)) for g, (p, c) in zip(got, pairs))
    cases = set()
    for prev, curr in pairs[:200]:
        cases |= set(zip(np.sign(curr.bid_prices - prev.bid_prices), np.sign(curr.ask_prices - prev.ask_prices)))
    print(f"mismatches {mismatches}, sign cases seen {len(cases)}, {elapsed:.1f}s")
    assert mismatches == 0 and len(cases) == 9
    assert elapsed < 10, elapsed


# -- 3 -------------------------------------------------------------------------------

def _reduced(arch, kind, siamese):
    return build_model(EncoderSpec(arch, seq_len=10, hidden=16), kind, siamese=siamese, seed=1)


def _single_encoder_count(arch, width, spec):
    D, T = spec.hidden, spec.seq_len
    lstm = lambda n_in: n_in * 4 * D + D * 4 * D + 4 * D
    h1, h2 = spec.mlp_hidden
    return {
        Architecture.MLP: T * width * h1 + h1 + h1 * h2 + h2 + h2 * D + D,
        Architecture.STACKED_LSTM: lstm(width) + 2 * lstm(D),
        Architecture.MLP_LSTM: width * spec.tick_mlp_hidden + spec.tick_mlp_hidden
        + spec.tick_mlp_hidden * D + D + 3 * lstm(D),
        Architecture.CNN_LSTM: sum((D // 4) * width * k + D // 4 for k in (1, 3, 5, 7)) + 3 * lstm(D),
        Architecture.LSTM_MHA: lstm(width) + lstm(D) + (D // spec.heads) * D + D,
    }[arch]


@pytest.mark.acceptance(3, "Siamese sharing invariants (constancy, single encoder, both-path gradients)")
def test_siamese_sharing():
    rng = np.random.default_rng(3)
    for arch, kind in itertools.product(Architecture, FeatureKind):
        m = _reduced(arch, kind, True)
        # (a) identical sides give one constant output
        outs = []
        for _ in range(100):
            side = rng.normal(size=(1, 10, kind.side_width))
            outs.append(siamese_forward(m, side, side).item())
        assert np.var(outs) <= 1e-12, (arch, np.var(outs))
        # (b) exactly one encoder's worth of parameters, which a plain model of half width would own
        count = sum(p.data.size for p in m.encoder_parameters())
        plain_half = _single_encoder_count(arch, kind.side_width, m.spec)
        assert count == plain_half, (arch, kind, count, plain_half)
        plain_full = sum(p.data.size for p in _reduced(arch, kind, False).encoder_parameters())
        assert plain_full == _single_encoder_count(arch, kind.width, m.spec)
        # (c) the shared weights collect gradient from both the ask and the bid path
        ask, bid = rng.normal(size=(4, 10, kind.side_width)), rng.normal(size=(4, 10, kind.side_width))
        ad.zero_grad(m.parameters)
        both = {k: v.copy() for k, v in ad.backprop(ad.sum_(siamese_forward(m, ask, bid)), m.parameters).items()}
        ad.zero_grad(m.parameters)
        frozen = ad.Tensor(m.encode(bid).data)
        single = ad.backprop(ad.sum_(m.head(m.encode(ask) - frozen)), m.parameters)
        enc = [k for k in both if k.startswith("enc.")]
        assert all(not np.allclose(both[k], single[k]) for k in enc if np.any(both[k])), arch
        assert any(np.any(both[k]) for k in enc)


# -- 4 -------------------------------------------------------------------------------

@pytest.mark.acceptance(4, "metric identities (R2 of mean/perfect, MAE/MSE and AC/std by hand)")
def test_metric_identities():
    rng = np.random.default_rng(4)
    for _ in range(50):
        y = rng.normal(size=int(rng.integers(2, 200)))
        assert abs(r2_os(np.full(len(y), y.mean()), y)) < 1e-12
        assert abs(r2_os(y, y) - 1.0) < 1e-12
    preds = np.array([0.5, -0.25, 0.0, 1.0, 0.125])
    targs = np.array([0.0, 0.25, 0.0, 0.5, -0.125])
    # |errors| = .5 .5 0 .5 .25 -> sum 1.75; squares .25 .25 0 .25 .0625 -> 0.8125
    mae, mse = mae_mse(preds, targs)
    assert mae == 1.75 / 5 and mse == 0.8125 / 5
    labels = [0.2, -0.1, 0.4, 0.0, -0.5]
    # mean 0.0; |dev| .2 .1 .4 0 .5 -> 1.2/5; dev^2 .04 .01 .16 0 .25 -> .46/5
    v = volatility_stats(labels)
    assert abs(v.ac - 0.24) < 1e-15 and abs(v.std - np.sqrt(0.092)) < 1e-15


# -- 5 -------------------------------------------------------------------------------

@pytest.mark.acceptance(5, "rank scores equal the brute-force oracle on 100 grids; 1..1/20 on one set")
def test_rank_oracle():
    rng = np.random.default_rng(5)
    combos = list(itertools.product([a.value for a in Architecture], ["LOB", "OFI"], [False, True]))
    ties_seen = 0
    for trial in range(100):
        pool = rng.uniform(0, 1, size=int(rng.integers(2, 8)))
        recs = []
        for s in range(int(rng.integers(1, 6))):
            for h in (10, 20, 50):
                for arch, feat, sia in combos:
                    mse = float(pool[rng.integers(len(pool))]) if trial % 2 == 0 else float(rng.uniform())
                    recs.append(EvalRecord(f"I{s % 2}", s, arch, feat, sia, h, 0.0, mse, 0.0))
        ties_seen += trial % 2 == 0
        got, want = rank_scores(recs).scores, brute_rank_scores(recs)
        assert got.keys() == want.keys()
        assert all(abs(got[k] - want[k]) < 1e-12 for k in want)
    one = [EvalRecord("I", 0, a, f, s, 10, 0.0, float(v), 0.0)
           for (a, f, s), v in zip(combos, rng.permutation(20) + 1)]
    assert np.allclose(sorted(rank_scores(one).scores.values()), sorted(1.0 / k for k in range(1, 21)), rtol=0, atol=1e-15)
    assert ties_seen == 50


# -- 6 -------------------------------------------------------------------------------

@pytest.mark.acceptance(6, "training protocol (patience-5 stop, best restore, bitwise reproducible)")
def test_training_protocol(monkeypatch):
    series = synth_generate(SynthConfig(n_days=1, ticks_min=4500, ticks_max=4500), seed=6)
    ss = build_windows(series, FeatureKind.OFI, 9, 10, stride=40)
    tr, va = ss.subset(np.arange(0, 80)), ss.subset(np.arange(80, 110))
    make = lambda: build_model(EncoderSpec(Architecture.STACKED_LSTM, seq_len=10, hidden=8), FeatureKind.OFI, seed=0)

    # scripted validation sequence
    script = iter([.5, .4, .41, .42, .43, .44, .45, .01])
    states = []
    real = training.evaluate_split

    def scripted(m, s):
        real(m, s)
        states.append(m.state_dict())
        return next(script)

    with monkeypatch.context() as mp:
        mp.setattr(training, "evaluate_split", scripted)
        m, hist = train(make(), tr, va, TrainConfig(lr=1e-2, batch_size=32, max_epochs=100), log=None)
    assert len(hist.epochs) == 7 and hist.best_epoch == 2
    assert all(np.array_equal(v, states[1][k]) for k, v in m.state_dict().items())

    # real run: the returned model scores exactly the history minimum
    cfg = TrainConfig(lr=3e-3, batch_size=32, max_epochs=12, patience=3, seed=9)
    m, hist = train(make(), tr, va, cfg, log=None)
    assert evaluate_split(m, va) == min(hist.val_maes)

    m2, hist2 = train(make(), tr, va, cfg, log=None)
    assert hist.to_json(include_time=False) == hist2.to_json(include_time=False)
    assert ad.dumps_checkpoint(m.state_dict()) == ad.dumps_checkpoint(m2.state_dict())


# -- 7 -------------------------------------------------------------------------------

@pytest.mark.acceptance(7, "learnability (64-sample memorisation; planted OFI drift gives R2 > 0 on >= 2/3 splits)")
def test_learnability():
    # (a) memorise 64 windows
    series = synth_generate(SynthConfig(n_days=1), seed=3)
    ss = build_windows(series, FeatureKind.OFI, 49, 10, stride=70).subset(np.arange(64))
    model = build_model(EncoderSpec(Architecture.STACKED_LSTM, seq_len=50, hidden=16), FeatureKind.OFI, seed=0)
    t0 = time.perf_counter()
    cfg = TrainConfig(lr=3e-3, weight_decay=0.0, batch_size=64, patience=500, max_epochs=500, seed=0)
    model, hist = train(model, ss, ss, cfg, log=None)
    train_mae = evaluate_split(model, ss)
    print(f"memorisation: train MAE {train_mae:.2e} (zero predictor {np.abs(ss.targets).mean():.2e}), "
          f"{time.perf_counter() - t0:.0f}s")
    assert train_mae < 0.01 and time.perf_counter() - t0 < 300
    assert train_mae < 0.2 * np.abs(ss.targets).mean()

    # (b) two instruments, nine weeks each, order flow that leads the price
    synth = SynthConfig(n_days=45, ticks_min=4500, ticks_max=4600, flow_drift=1.0)
    per_instrument = {}
    for i in range(2):
        s = synth_generate(synth, seed=100 + i, instrument_id=f"D{i}")
        splits = rolling_splits(s)
        assert len(splits) == 3
        r2s = []
        for sp in splits:
            parts = split_sample_sets(s, sp, FeatureKind.OFI, 49, 10, stride=40, scale_ofi=True)
            m = build_model(EncoderSpec(Architecture.STACKED_LSTM, seq_len=50, hidden=16), FeatureKind.OFI, seed=0)
            m, _ = train(m, parts["train"], parts["valid"],
                         TrainConfig(lr=3e-3, batch_size=256, max_epochs=30, seed=0), log=None)
            r2s.append(r2_os(predict(m, parts["test"]), parts["test"].targets))
        per_instrument[s.instrument_id] = r2s
    print("test R2 by instrument:", {k: [round(v, 3) for v in vs] for k, vs in per_instrument.items()})
    for r2s in per_instrument.values():
        assert sum(r > 0 for r in r2s) >= 2


# -- 8 -------------------------------------------------------------------------------

GRID_CFG = {
    "seed": 8,
    "instruments": ["SYN0"],
    "max_splits": 1,
    "stride": 200,
    "model": {"hidden": 16},
    "train": {"max_epochs": 3},
}


def _files(root: Path, sub: str) -> dict[str, bytes]:
    base = root / sub
    return {p.relative_to(base).as_posix(): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}


@pytest.mark.acceptance(8, "60-cell desk-scale grid end to end, all report files, byte-identical rerun (< 15 min)")
def test_grid_reproduction(tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = config_from_dict(dict(GRID_CFG, out=str(tmp_path / name)))
        t0 = time.perf_counter()
        out = grid.run_grid(cfg)
        elapsed = time.perf_counter() - t0
        print(f"grid run {name}: {elapsed:.0f}s")
        assert elapsed < 900
        runs.append((cfg, out))
    cfg, out = runs[0]
    names = sorted(p.name for p in out.iterdir())
    assert names == ["horizon_10.csv", "horizon_20.csv", "horizon_50.csv", "metrics.csv", "ranks.json",
                     "regressions.json", "volatility.csv", "wins.json"]
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 61
    ranks = json.loads((out / "ranks.json").read_text())
    assert ranks["combinations"] == 20 and len(ranks["scores"]) == 60

    a, b = tmp_path / "a", tmp_path / "b"
    assert _files(a, "report") == _files(b, "report")
    assert _files(a, "cells") == _files(b, "cells")
    assert _files(a, "data") == _files(b, "data")

    # resuming a finished grid trains nothing and rewrites the same bytes
    before = _files(a, "report")
    t0 = time.perf_counter()
    grid.run_grid(cfg)
    assert time.perf_counter() - t0 < 60
    assert _files(a, "report") == before


# -- 9 -------------------------------------------------------------------------------

@pytest.mark.acceptance(9, "OLS matches the normal equations to 1e-12; (0,1),(1,3) -> (2,1)")
def test_ols_diagnostics():
    rng = np.random.default_rng(9)
    for _ in range(200):
        n = int(rng.integers(2, 60))
        x, y = rng.normal(size=n), rng.normal(size=n)
        fit = ols_fit(x, y)
        slope, intercept = normal_equation_fit(x, y)
        assert abs(fit.slope - slope) < 1e-12 and abs(fit.intercept - intercept) < 1e-12
    fit = ols_fit([0.0, 1.0], [1.0, 3.0])
    assert (fit.slope, fit.intercept) == (2.0, 1.0)
