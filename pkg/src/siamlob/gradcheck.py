"""Finite-difference verification of every primitive and every architecture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeatureKind
from .models import Architecture, EncoderSpec, SiameseHeadConfig, build_model

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4
# 1e-4 balances truncation against round-off; softmax and Siamese encoder gradients can be
# tiny after cancellation, where a smaller step leaves only round-off in the difference
PRIMITIVE_EPS = 1e-4
MODEL_EPS = 1e-4


@dataclass(frozen=True)
class GradCheckSettings:
    hidden: int = 16
    seq_len: int = 8
    batch: int = 4
    coords_per_param: int = 12
    trials: int = 10
    seed: int = 0


def _leaf(rng, shape, name="x") -> ad.Parameter:
    return ad.Parameter(rng.normal(size=shape), name)


def _primitive_cases(rng: np.random.Generator):
    """Yield ``(name, params, f)`` where ``f`` rebuilds a scalar from ``params``."""
    def weighted(out_fn):
        w = rng.normal(size=out_fn().shape)
        return lambda: ad.sum_(out_fn() * w)

    n, m, k = rng.integers(2, 5, size=3)
    a, b = _leaf(rng, (n, k), "a"), _leaf(rng, (k, m), "b")
    yield "matmul", [a, b], weighted(lambda: ad.matmul(a, b))
    a3, w2 = _leaf(rng, (2, n, k), "a"), _leaf(rng, (k, m), "w")
    yield "matmul_batched", [a3, w2], weighted(lambda: ad.matmul(a3, w2))
    x, y = _leaf(rng, (n, m), "x"), _leaf(rng, (m,), "y")
    yield "add", [x, y], weighted(lambda: ad.add(x, y))
    yield "sub", [x, y], weighted(lambda: ad.sub(x, y))
    yield "mul", [x, y], weighted(lambda: ad.mul(x, y))
    yield "sigmoid", [x], weighted(lambda: ad.sigmoid(x))
    yield "tanh", [x], weighted(lambda: ad.tanh(x))
    # keep entries away from the kink at 0
    xa = ad.Parameter(rng.uniform(0.1, 1.0, size=(n, m)) * rng.choice([-1, 1], size=(n, m)), "x")
    yield "abs", [xa], weighted(lambda: ad.abs_(xa))
    yield "softmax", [x], weighted(lambda: ad.softmax(x, axis=-1))
    yield "softmax_axis0", [x], weighted(lambda: ad.softmax(x, axis=0))
    z = _leaf(rng, (n, k), "z")
    yield "concat", [a, z], weighted(lambda: ad.concat([a, z], axis=-1))
    yield "slice", [x], weighted(lambda: x[:, 1:])
    yield "reshape", [x], weighted(lambda: ad.reshape(x, (m, n)))
    yield "sum", [x], weighted(lambda: ad.sum_(x, axis=0))
    yield "mean", [x], weighted(lambda: ad.mean(x, axis=1))
    T, cin, cout = int(rng.integers(3, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    for ks in (1, 3, 5, 7):
        xc, wc, bc = _leaf(rng, (2, T, cin), "x"), _leaf(rng, (cout, cin, ks), "w"), _leaf(rng, (cout,), "b")
        yield f"conv1d_k{ks}", [xc, wc, bc], weighted(lambda xc=xc, wc=wc, bc=bc: ad.conv1d_same(xc, wc, bc))


def check_primitives(settings: GradCheckSettings = GradCheckSettings()) -> dict[str, float]:
    """Worst relative error per primitive over ``settings.trials`` random draws."""
    worst: dict[str, float] = {}
    for trial in range(settings.trials):
        rng = np.random.default_rng([settings.seed, trial])
        for name, params, f in _primitive_cases(rng):
            err = ad.grad_check(f, params, eps=PRIMITIVE_EPS)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_architecture(arch: Architecture, settings: GradCheckSettings = GradCheckSettings()) -> float:
    """Worst error over LOB/OFI inputs and plain/Siamese heads on an MAE loss."""
    worst = 0.0
    for kind in FeatureKind:
        for siamese in (False, True):
            rng = np.random.default_rng([settings.seed, len(arch.value), int(siamese), kind.width])
            spec = EncoderSpec(arch, seq_len=settings.seq_len, hidden=settings.hidden)
            model = build_model(spec, kind, siamese=siamese, head_cfg=SiameseHeadConfig(), seed=settings.seed)
            x = rng.normal(size=(settings.batch, settings.seq_len, kind.width))
            y = rng.uniform(-0.5, 0.5, size=settings.batch)
            # sign-balanced residuals give the output bias an exactly-zero gradient, so the
            # relative error would compare round-off with round-off; reflect one target
            with ad.no_grad():
                pred = model(x).data
            if np.sum(np.sign(pred - y)) == 0:
                y[0] = 2 * pred[0] - y[0]

            def loss():
                return ad.mean(ad.abs_(model(x) - y))

            err = ad.grad_check(loss, model.parameters, eps=MODEL_EPS,
                                max_coords=settings.coords_per_param, seed=settings.seed)
            worst = max(worst, err)
    return worst


def check_architectures(settings: GradCheckSettings = GradCheckSettings()) -> dict[str, float]:
    return {arch.value: check_architecture(arch, settings) for arch in Architecture}
