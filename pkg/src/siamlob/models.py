"""Baseline encoders, the LSTM-MHA decoder and the Siamese wrapper.

Every model is an *encoder* producing a feature vector per sample followed by
a *head*. The plain head is one linear map to a scalar. The Siamese head runs
the one encoder on the ask side and on the bid side and maps the feature
difference through a two-layer affine stack and a scaled sigmoid.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .features import FeatureKind, split_sides_array


class Architecture(str, enum.Enum):
    MLP = "MLP"
    STACKED_LSTM = "StackedLSTM"
    MLP_LSTM = "MLP_LSTM"
    CNN_LSTM = "CNN_LSTM"
    LSTM_MHA = "LSTM_MHA"

    @classmethod
    def parse(cls, value: str) -> "Architecture":
        norm = value.replace("-", "_").replace(" ", "").lower()
        for arch in cls:
            if arch.value.lower() == norm or arch.name.lower() == norm:
                return arch
        raise ValueError(f"unknown architecture {value!r}")


INCEPTION_KERNELS = (1, 3, 5, 7)


@dataclass(frozen=True)
class EncoderSpec:
    architecture: Architecture
    seq_len: int = 50
    hidden: int = 64
    heads: int = 4
    lstm_layers: int = 3
    mlp_hidden: tuple[int, int] = (500, 250)
    tick_mlp_hidden: int = 128

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.architecture is Architecture.CNN_LSTM and self.hidden % len(INCEPTION_KERNELS):
            raise ValueError("CNN_LSTM needs a hidden size divisible by the number of inception branches")

    @property
    def feature_width(self) -> int:
        if self.architecture is Architecture.MLP:
            return self.hidden
        if self.architecture is Architecture.LSTM_MHA:
            return 2 * self.hidden
        return self.lstm_layers * self.hidden


@dataclass(frozen=True)
class SiameseHeadConfig:
    hidden: int = 32
    alpha: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def _init_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class Model:
    """Parameters plus the forward pass for one grid architecture."""

    def __init__(self, spec: EncoderSpec, kind: FeatureKind, siamese: bool = False,
                 head_cfg: SiameseHeadConfig | None = None, seed: int = 0):
        self.spec = spec
        self.kind = kind
        self.siamese = siamese
        self.head_cfg = head_cfg or SiameseHeadConfig()
        self.seed = seed
        self.input_width = kind.width // 2 if siamese else kind.width
        self.params: dict[str, Parameter] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape: tuple[int, ...], fan_in: int) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        bound = 1.0 / np.sqrt(fan_in)
        data = _init_rng(self.seed, name).uniform(-bound, bound, size=shape)
        p = self.params[name] = Parameter(data, name)
        return p

    def _linear(self, prefix: str, n_in: int, n_out: int) -> None:
        self._param(f"{prefix}.W", (n_in, n_out), n_in)
        self._param(f"{prefix}.b", (n_out,), n_in)

    def _lstm(self, prefix: str, n_in: int) -> None:
        D = self.spec.hidden
        # gate blocks along the last axis: forget, input, output, candidate
        self._param(f"{prefix}.U", (n_in, 4 * D), D)
        self._param(f"{prefix}.W", (D, 4 * D), D)
        self._param(f"{prefix}.b", (4 * D,), D)

    def _build(self) -> None:
        s, F, D = self.spec, self.input_width, self.spec.hidden
        arch = s.architecture
        if arch is Architecture.MLP:
            widths = [s.seq_len * F, *s.mlp_hidden, D]
            for i in range(len(widths) - 1):
                self._linear(f"enc.mlp{i}", widths[i], widths[i + 1])
        else:
            lstm_in = F
            if arch is Architecture.MLP_LSTM:
                self._linear("enc.tick0", F, s.tick_mlp_hidden)
                self._linear("enc.tick1", s.tick_mlp_hidden, D)
                lstm_in = D
            elif arch is Architecture.CNN_LSTM:
                branch = D // len(INCEPTION_KERNELS)
                for k in INCEPTION_KERNELS:
                    self._param(f"enc.conv{k}.w", (branch, F, k), F * k)
                    self._param(f"enc.conv{k}.b", (branch,), F * k)
                lstm_in = D
            n_layers = 2 if arch is Architecture.LSTM_MHA else s.lstm_layers
            for layer in range(n_layers):
                self._lstm(f"enc.lstm{layer}", lstm_in if layer == 0 else D)
            if arch is Architecture.LSTM_MHA:
                h = D // s.heads
                self._param("enc.mha.Wa", (h, D), h)
                self._param("enc.mha.ba", (D,), h)
        feat = s.feature_width
        if self.siamese:
            self._linear("head.o1", feat, self.head_cfg.hidden)
            self._linear("head.o2", self.head_cfg.hidden, 1)
        else:
            self._linear("head.out", feat, 1)

    # -- introspection --------------------------------------------------------

    @property
    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def encoder_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters if p.name.startswith("enc.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("checkpoint parameter names do not match the model")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data[...] = arr

    # -- forward --------------------------------------------------------------

    def _affine(self, x: Tensor, prefix: str) -> Tensor:
        return x @ self.params[f"{prefix}.W"] + self.params[f"{prefix}.b"]

    def encode(self, x) -> Tensor:
        """Feature vectors ``(B, feature_width)`` for inputs ``(B, seq_len, input_width)``."""
        x = ad.as_tensor(x)
        s = self.spec
        if x.ndim != 3 or x.shape[1:] != (s.seq_len, self.input_width):
            raise ad.DimensionError(
                f"{s.architecture.value}: expected inputs (B, {s.seq_len}, {self.input_width}), got {x.shape}"
            )
        arch = s.architecture
        if arch is Architecture.MLP:
            h = ad.reshape(x, (x.shape[0], s.seq_len * self.input_width))
            n = len(s.mlp_hidden) + 1
            for i in range(n):
                h = self._affine(h, f"enc.mlp{i}")
                h = ad.tanh(h)
            return h
        if arch is Architecture.MLP_LSTM:
            x = ad.tanh(self._affine(x, "enc.tick0"))
            x = ad.tanh(self._affine(x, "enc.tick1"))
        elif arch is Architecture.CNN_LSTM:
            x = inception_block(x, self.params)
        if arch is Architecture.LSTM_MHA:
            hs, cs = lstm_layer(x, self.params, "enc.lstm0")
            hs, cs = lstm_layer(hs, self.params, "enc.lstm1")
            o_last = hs[:, -1, :]
            return mha_features(cs, o_last, self.params["enc.mha.Wa"], self.params["enc.mha.ba"], s.heads)
        return stacked_lstm_forward(x, self.params, s.lstm_layers)

    def head(self, features: Tensor) -> Tensor:
        if self.siamese:
            cfg = self.head_cfg
            z = self._affine(self._affine(features, "head.o1"), "head.o2")
            return ad.sigmoid(z)[:, 0] * cfg.alpha - cfg.beta
        return self._affine(features, "head.out")[:, 0]

    def __call__(self, inputs: np.ndarray | Tensor) -> Tensor:
        """Predictions ``(B,)`` from full-width inputs ``(B, seq_len, F)``."""
        if self.siamese:
            data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)
            ask, bid = split_sides_array(data, self.kind)
            return siamese_forward(self, ask, bid)
        return self.head(self.encode(inputs))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, U, W, b) -> tuple[Tensor, Tensor]:
    """One LSTM step; ``U``/``W``/``b`` hold the forget, input, output and candidate blocks."""
    D = h_prev.shape[-1]
    z = ad.as_tensor(x) @ U + h_prev @ W + b
    return _lstm_gates(z, c_prev, D)


def _lstm_gates(z: Tensor, c_prev: Tensor, D: int) -> tuple[Tensor, Tensor]:
    f = ad.sigmoid(z[..., 0:D])
    i = ad.sigmoid(z[..., D:2 * D])
    o = ad.sigmoid(z[..., 2 * D:3 * D])
    cand = ad.tanh(z[..., 3 * D:4 * D])
    c = f * c_prev + i * cand
    h = o * ad.tanh(c)
    return h, c


def lstm_layer(x: Tensor, params: Mapping[str, Parameter], prefix: str) -> tuple[Tensor, Tensor]:
    """Run one LSTM layer over ``(B, T, N)``; returns hidden and cell sequences ``(B, T, D)``."""
    U, W, b = params[f"{prefix}.U"], params[f"{prefix}.W"], params[f"{prefix}.b"]
    D = W.shape[0]
    B, T = x.shape[0], x.shape[1]
    xu = x @ U + b  # input projections for every step at once
    h = Tensor(np.zeros((B, D)))
    c = Tensor(np.zeros((B, D)))
    hs, cs = [], []
    for t in range(T):
        z = xu[:, t, :] + h @ W
        h, c = _lstm_gates(z, c, D)
        hs.append(ad.reshape(h, (B, 1, D)))
        cs.append(ad.reshape(c, (B, 1, D)))
    return ad.concat(hs, axis=1), ad.concat(cs, axis=1)


def stacked_lstm_forward(x: Tensor, params: Mapping[str, Parameter], layers: int = 3) -> Tensor:
    """Concatenation of every layer's final hidden state, ``(B, layers * D)``."""
    finals = []
    for layer in range(layers):
        x, _ = lstm_layer(x, params, f"enc.lstm{layer}")
        finals.append(x[:, -1, :])
    return ad.concat(finals, axis=-1)


def inception_block(x: Tensor, params: Mapping[str, Parameter]) -> Tensor:
    """Parallel same-padded convolutions (kernels 1, 3, 5, 7) concatenated on channels."""
    branches = [
        ad.conv1d_same(x, params[f"enc.conv{k}.w"], params[f"enc.conv{k}.b"]) for k in INCEPTION_KERNELS
    ]
    return ad.concat(branches, axis=-1)


def mha_attention(states: Tensor, o_last: Tensor, Wa: Tensor, ba: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Per-head attention weights ``(B, K, T)`` and contexts ``(B, K, D/K)``.

    Scores are ``o_last . tanh(Wa s + ba)`` over the head slices ``s`` of every
    state; weights are a softmax over time.
    """
    B, T, D = states.shape
    if D % heads:
        raise ad.DimensionError(f"mha: width {D} is not divisible by {heads} heads")
    h = D // heads
    q = ad.reshape(o_last, (B, 1, D))
    weights, contexts = [], []
    for k in range(heads):
        s_k = states[:, :, k * h:(k + 1) * h]  # (B, T, h)
        keys = ad.tanh(s_k @ Wa + ba)  # (B, T, D)
        scores = ad.sum_(keys * q, axis=-1)  # (B, T)
        a = ad.softmax(scores, axis=-1)
        ctx = ad.sum_(ad.reshape(a, (B, T, 1)) * s_k, axis=1)  # (B, h)
        weights.append(ad.reshape(a, (B, 1, T)))
        contexts.append(ad.reshape(ctx, (B, 1, h)))
    return ad.concat(weights, axis=1), ad.concat(contexts, axis=1)


def mha_features(states: Tensor, o_last: Tensor, Wa, ba, heads: int) -> Tensor:
    """``f^1 (+) ... (+) f^K (+) o_last``, shape ``(B, 2D)``."""
    B, _, D = states.shape
    _, ctx = mha_attention(states, o_last, Wa, ba, heads)
    return ad.concat([ad.reshape(ctx, (B, D)), o_last], axis=-1)


def mha_decode(states, o_last, Wa, ba, Wo, bo, heads: int) -> Tensor:
    """Scalar prediction per sample: ``Wo . (f^1 (+) ... (+) f^K (+) o_last) + bo``."""
    feats = mha_features(ad.as_tensor(states), ad.as_tensor(o_last), Wa, ba, heads)
    return (feats @ Wo + bo)[:, 0]


def siamese_forward(model: Model, ask, bid) -> Tensor:
    if not model.siamese:
        raise ValueError("siamese_forward needs a model built with siamese=True")
    f_ask = model.encode(ask)
    f_bid = model.encode(bid)
    return model.head(f_ask - f_bid)


def build_model(spec: EncoderSpec, kind: FeatureKind, siamese: bool = False,
                head_cfg: SiameseHeadConfig | None = None, seed: int = 0) -> Model:
    return Model(spec, kind, siamese=siamese, head_cfg=head_cfg, seed=seed)


def forward(model: Model, inputs: np.ndarray, kind: FeatureKind | None = None) -> np.ndarray:
    """Plain-array predictions for a batch of full-width windows."""
    if kind is not None and kind is not model.kind:
        raise ValueError(f"model expects {model.kind.value} inputs, batch is {kind.value}")
    return model(np.asarray(inputs, dtype=np.float64)).data.copy()
