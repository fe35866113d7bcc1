"""Small reverse-mode autodiff over numpy float64 arrays.

Only the operations the forecasting network needs are provided. Every op
returns a new Tensor that remembers its parents and a closure mapping the
output gradient to parent gradients; ``Tensor.backward`` walks the graph in
reverse topological order. Gradients accumulate on leaf tensors only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "cvtraffic-params"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward: Callable | None = None):
        leaf_param = requires_grad and _backward is None
        # leaves that train own their buffer; everything else may share the producer's array
        self.data = np.array(data, dtype=np.float64) if leaf_param else np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad and _backward is None else None
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + gp if key in grads else gp

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-axis broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def elementwise(op: str, *args) -> Tensor:
    table = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "mul": mul, "add": add}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 e^2 / beta below beta, |e| - beta/2 above."""
    pred = as_tensor(pred)
    e = pred.data - np.asarray(target, dtype=float)
    a = np.abs(e)
    small = a < beta
    out = np.where(small, 0.5 * e * e / beta, a - 0.5 * beta)
    return _make(out, (pred,), lambda g: (g * np.where(small, e / beta, np.sign(e)),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (evaluation) or rate is 0."""
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_right2d(a, b)
    if a.ndim == 2 and b.ndim > 2:
        return _matmul_left2d(a, b)
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), back)


def _matmul_right2d(a: Tensor, b: Tensor) -> Tensor:
    # [..., m, k] @ [k, n] as one flat GEMM
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def back(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back)


def _matmul_left2d(a: Tensor, b: Tensor) -> Tensor:
    # [m, k] @ [..., k, n]: contract a's columns with b's second-to-last axis
    m, k = a.shape
    bt = np.moveaxis(b.data, -2, 0)  # [k, ..., n]
    out = np.moveaxis((a.data @ bt.reshape(k, -1)).reshape((m,) + bt.shape[1:]), 0, -2)

    def back(g):
        gt = np.moveaxis(g, -2, 0).reshape(m, -1)
        ga = gt @ bt.reshape(k, -1).T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.moveaxis((a.data.T @ gt).reshape((k,) + bt.shape[1:]), 0, -2)
        return ga, gb

    return _make(out, (a, b), back)


def row_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        pre = (slice(None),) * ax
        return tuple(g[pre + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tensors, back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(idx)

    def back(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def embedding(table: Tensor, codes) -> Tensor:
    """Row lookup ``table[codes]``; codes outside the vocabulary raise."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= table.shape[0]):
        raise IndexError(f"code out of vocabulary (size {table.shape[0]})")

    def back(g):
        v, d = table.shape[0], int(np.prod(table.shape[1:]))
        flat_idx = (codes.reshape(-1, 1) * d + np.arange(d)).reshape(-1)
        out = np.bincount(flat_idx, weights=g.reshape(-1), minlength=v * d)
        return (out.reshape(table.shape),)

    return _make(table.data[codes], (table,), back)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def _shift_time(a: np.ndarray, s: int, axis: int) -> np.ndarray:
    """Delay along ``axis`` by ``s`` steps with zero fill (out[t] = a[t - s])."""
    if s == 0:
        return a
    out = np.zeros_like(a)
    n = a.shape[axis]
    if s < n:
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        src[axis] = slice(0, n - s)
        dst[axis] = slice(s, n)
        out[tuple(dst)] = a[tuple(src)]
    return out


def _advance_time(a: np.ndarray, s: int, axis: int) -> np.ndarray:
    """Adjoint of ``_shift_time``: out[t] = a[t + s]."""
    if s == 0:
        return a
    out = np.zeros_like(a)
    n = a.shape[axis]
    if s < n:
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        src[axis] = slice(s, n)
        dst[axis] = slice(0, n - s)
        out[tuple(dst)] = a[tuple(src)]
    return out


def conv_time_last(x: Tensor, f: Tensor, dilation: int, time_axis: int = -2) -> Tensor:
    """Causal dilated convolution with channels on the last axis.

    x: [..., T, C_in] (time on ``time_axis``); f: [C_out, C_in, K];
    out[..., t, o] = sum_i sum_c f[o, c, i] x[..., t - d*i, c].
    """
    x, f = as_tensor(x), as_tensor(f)
    if dilation < 1 or f.ndim != 3 or f.shape[1] != x.shape[-1]:
        raise ValueError(f"bad convolution arguments x{ x.shape } f{ f.shape } d={dilation}")
    K = f.shape[2]
    t_axis = time_axis % x.ndim
    if t_axis == x.ndim - 1:
        raise ValueError("time axis cannot be the channel axis")
    shifted = [_shift_time(x.data, dilation * i, t_axis) for i in range(K)]
    c_in, c_out = f.shape[1], f.shape[0]
    taps = [np.ascontiguousarray(f.data[:, :, i].T) for i in range(K)]  # [C_in, C_out]
    flat = [s.reshape(-1, c_in) for s in shifted]
    out = flat[0] @ taps[0]
    for i in range(1, K):
        out += flat[i] @ taps[i]
    out = out.reshape(x.shape[:-1] + (c_out,))

    def back(g):
        gx = gf = None
        g2 = g.reshape(-1, c_out)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(K):
                gx += _advance_time((g2 @ taps[i].T).reshape(x.shape), dilation * i, t_axis)
        if f.requires_grad:
            gf = np.empty_like(f.data)
            for i in range(K):
                gf[:, :, i] = g2.T @ flat[i]
        return gx, gf

    return _make(out, (x, f), back)


def dilated_causal_conv(x: Tensor, f: Tensor, dilation: int) -> Tensor:
    """Causal dilated convolution on x[..., C_in, T] with f[C_out, C_in, K] -> [..., C_out, T]."""
    x = as_tensor(x)
    nd = x.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return transpose(conv_time_last(transpose(x, perm), f, dilation), perm)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints

INIT_SPECS = ("uniform_fanin", "zeros", "svd_seeded", "constant")


@dataclass
class Param:
    name: str
    tensor: Tensor
    init_spec: str = "uniform_fanin"

    def __post_init__(self):
        if self.init_spec not in INIT_SPECS:
            raise ValueError(f"unknown init spec {self.init_spec!r}")
        if not self.tensor.requires_grad:
            raise ValueError(f"param {self.name!r} must require grad")
        if not np.all(np.isfinite(self.tensor.data)):
            raise ValueError(f"param {self.name!r} has non-finite values")

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad


def uniform_fanin(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape))


class ParamStore:
    """Ordered, uniquely named parameter collection."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, init_spec: str = "uniform_fanin") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = Param(name, t, init_spec)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self._params.items():
            v = np.asarray(state[n], dtype=np.float64)
            if v.shape != p.tensor.shape:
                raise ValueError(f"checkpoint shape mismatch for {n!r}: {v.shape} vs {p.tensor.shape}")
            p.tensor.data[...] = v


class Adam:
    """Adaptive moment estimation with global gradient-norm clipping."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps, self.clip_norm = lr, betas, eps, clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in self.params])))

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()


def save_checkpoint(store: ParamStore, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "params": {p.name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()} for p in store},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    state = {n: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for n, v in doc["params"].items()}
    return state, doc.get("extra", {})


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Relative error between analytic and central-difference gradients, one value per tensor.

    ``loss_fn`` must rebuild the graph from the current tensor data and return a
    scalar. Error is ||g_a - g_n|| / max(||g_a||, ||g_n||, 1e-12).
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    errs = []
    for t, ga in zip(tensors, analytic):
        gn = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = gn.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
        errs.append(float(np.linalg.norm(ga - gn) / denom))
    for t in tensors:
        t.zero_grad()
    return errs
