"""A small reverse-mode differentiation engine on numpy float64 arrays.

Only the primitives the forecasting models need are provided. Every primitive
records a closure mapping the output gradient to one gradient per parent;
:func:`backprop` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class GradCheckError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, parents: tuple = (), backward=None, requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference only); per thread."""
    prev = getattr(_local, "enabled", True)
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = getattr(_local, "enabled", True) and any(p.requires_grad for p in parents)
    return Tensor(out, tuple(parents) if needs else (), backward if needs else None, needs, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., n, k)`` and ``b`` of shape ``(k, m)`` or ``(..., k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _node("matmul", out, (a, b), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)  # subgradient 0 at 0
    return _node("abs", np.abs(x.data), (x,), lambda g: (g * s,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat: no inputs")
    ndim = xs[0].ndim
    ax = axis % ndim
    for x in xs:
        if x.ndim != ndim or any(x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != ax):
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple(
            g[(slice(None),) * ax + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(xs))
        )

    return _node("concat", out, xs, backward)


def slice_(x, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    out = x.data[index]

    return _node("slice", np.array(out), (x,), lambda g: (_SliceGrad(index, g),))


class _SliceGrad:
    """Gradient that is non-zero only on ``index``; scattered lazily by :func:`backprop`."""

    __slots__ = ("index", "g")

    def __init__(self, index, g):
        self.index = index
        self.g = g


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node("mean", np.asarray(out), (x,), backward)


def conv1d_same(x, w, b=None) -> Tensor:
    """Same-padded 1-D cross-correlation over time.

    ``x`` is ``(B, T, C_in)``, ``w`` is ``(C_out, C_in, k)`` with odd ``k``,
    ``b`` is ``(C_out,)``; the result is ``(B, T, C_out)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or w.shape[1] != x.shape[2]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"conv1d: kernel size {k} must be odd")
    pad = k // 2
    T = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = sliding_window_view(xp, k, axis=1)  # (B, T, C_in, k)
    out = np.tensordot(cols, w.data, axes=([2, 3], [1, 2]))
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv1d: bias {b.shape} does not match {w.shape[0]} output channels")
        out = out + b.data
        parents.append(b)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 1], [0, 1]))  # (C_out, C_in, k)
        gcols = np.tensordot(g, w.data, axes=([2], [0]))  # (B, T, C_in, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + T, :] += gcols[..., j]
        grads = [gxp[:, pad:pad + T, :], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return _node("conv1d", out, parents, backward)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "abs": abs_,
    "softmax": softmax,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "conv1d": conv1d_same,
}


def apply_primitive(op: str, inputs: Sequence, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the accumulated gradients keyed by parameter name. Parameters in
    ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    # id -> [gradient, owned]; an owned buffer may be updated in place
    grads: dict[int, list] = {id(loss): [np.ones_like(loss.data), True]}
    for node in reversed(_topo_order(loss)):
        entry = grads.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            slot = grads.get(key)
            if isinstance(pg, _SliceGrad):
                if slot is None:
                    buf = np.zeros_like(parent.data)
                    grads[key] = slot = [buf, True]
                elif not slot[1]:
                    slot[0] = slot[0].copy()
                    slot[1] = True
                slot[0][pg.index] += pg.g
            elif slot is None:
                grads[key] = [pg, False]
            elif slot[1]:
                slot[0] += pg
            else:
                grads[key] = [slot[0] + pg, True]
    out: dict[str, np.ndarray] = {}
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p.name] = p.grad
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` re-evaluates the scalar loss from the current parameter values. With
    ``max_coords`` only that many randomly chosen coordinates per parameter are
    probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite")
    analytic = {p.name: g.copy() for p, g in zip(params, backprop(loss, params).values())}
    zero_grad(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss while perturbing {p.name}[{i}]")
            num = (up - down) / (2 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: AdamConfig,
) -> tuple[Mapping[str, Parameter], AdamState]:
    """One bias-corrected Adam update, in place, with L2 weight decay added to the gradient."""
    missing = [name for name, p in params.items() if p.trainable and name not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters: {', '.join(sorted(missing))}")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        if not p.trainable:
            continue
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return params, state


# Checkpoint container: magic, u32 version, u32 count, then per tensor
# u32 name length, utf-8 name, u32 ndim, u64 dims, little-endian float64 data.
_MAGIC = b"SLOBCKPT"
_VERSION = 1


def dumps_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a checkpoint file")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
