"""Mini-batch Adam training on the MAE loss with validation early stopping."""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import TextIO

import numpy as np

from . import autodiff as ad
from .features import SampleSet
from .models import Model

EVAL_BATCH = 1024


class TrainingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 256
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size, patience and max_epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def adam(self) -> ad.AdamConfig:
        return ad.AdamConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    seconds: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def val_maes(self) -> list[float]:
        return [e.val_mae for e in self.epochs]

    def to_dict(self, include_time: bool = True) -> dict:
        rows = [asdict(e) for e in self.epochs]
        if not include_time:
            for r in rows:
                r.pop("seconds")
        return {"best_epoch": self.best_epoch, "epochs": rows}

    def to_json(self, include_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_time), indent=1, sort_keys=True) + "\n"


class EarlyStopping:
    """Tracks the best validation MAE; an epoch improves only if strictly lower."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def predict(model: Model, samples: SampleSet, batch_size: int = EVAL_BATCH) -> np.ndarray:
    out = np.empty(len(samples))
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(samples)))
            out[idx] = model(samples.inputs(idx)).data
    return out


def evaluate_split(model: Model, samples: SampleSet) -> float:
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    return float(np.mean(np.abs(predict(model, samples) - samples.targets)))


def _check_kind(model: Model, samples: SampleSet, part: str) -> None:
    if len(samples) == 0:
        raise ValueError(f"{part} set is empty")
    if samples.kind is not model.kind:
        raise ValueError(f"{part} set holds {samples.kind.value} windows, model expects {model.kind.value}")


def train(model: Model, train_samples: SampleSet, valid_samples: SampleSet, cfg: TrainConfig,
          log: TextIO | None = sys.stderr) -> tuple[Model, History]:
    """Train in place and return the model restored to its best validation epoch."""
    _check_kind(model, train_samples, "train")
    _check_kind(model, valid_samples, "valid")
    rng = np.random.default_rng(cfg.seed)
    adam_cfg = cfg.adam
    state = ad.AdamState()
    params = model.params
    plist = model.parameters
    stopper = EarlyStopping(cfg.patience)
    history = History()
    best_state = model.state_dict()
    n = len(train_samples)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = train_samples.inputs(idx)
            y = train_samples.targets[idx]
            ad.zero_grad(plist)
            try:
                loss = ad.mean(ad.abs_(model(x) - y))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            grads = ad.backprop(loss, plist)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"epoch {epoch}, batch {b}: non-finite gradient")
            ad.adam_step(params, grads, state, adam_cfg)
            total += loss.item() * len(idx)
        train_loss = total / n
        try:
            val_mae = evaluate_split(model, valid_samples)
        except ad.NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}, validation: {exc}") from exc
        seconds = time.perf_counter() - t0
        history.epochs.append(EpochRecord(epoch, train_loss, val_mae, seconds))
        if log is not None:
            print(f"{epoch},{train_loss:.8g},{val_mae:.8g},{seconds:.3f}", file=log, flush=True)
        if stopper.update(epoch, val_mae):
            best_state = model.state_dict()
        if stopper.should_stop:
            break

    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    ad.zero_grad(plist)
    return model, history
