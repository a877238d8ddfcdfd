"""Dense-tensor engine with reverse-mode differentiation.

Everything is double precision. A Tensor wraps a numpy array plus the
closure needed to push gradients to its parents; `backward()` runs the
tape in reverse topological order. Gradient construction can be switched
off with `no_grad()` for cheap inference.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
LAYERNORM_EPS = 1e-5
SAFE_DIV_EPS = 1e-7

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = parents if _grad_enabled else ()
        self._backward: Optional[Callable[[np.ndarray], None]] = (
            backward if _grad_enabled else None
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # convenience arithmetic (floats allowed)
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bw(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bw(g):
        a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, (a, b), bw)


def safe_div(a: Tensor, b: Tensor) -> Tensor:
    """a / b with |denominator| clamped away from zero."""
    sign = np.where(b.data >= 0, 1.0, -1.0)
    denom = sign * np.maximum(np.abs(b.data), SAFE_DIV_EPS)
    out_data = a.data / denom
    in_band = np.abs(b.data) < SAFE_DIV_EPS

    def bw(g):
        a.accumulate(_unbroadcast(g / denom, a.data.shape))
        gb = np.where(in_band, 0.0, -g * a.data / (denom * denom))
        b.accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def bw(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return Tensor(out_data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x [B, in] @ w.T [in, out] (+ b): the MM primitive."""
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def bw(g):
        x.accumulate(g @ w.data)
        w.accumulate(g.T @ x.data)
        if b is not None:
            b.accumulate(g.sum(axis=0) if g.ndim > b.data.ndim else g)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out_data, parents, bw)


def _unary(x: Tensor, out_data: np.ndarray, dlocal: np.ndarray) -> Tensor:
    def bw(g):
        x.accumulate(g * dlocal)

    return Tensor(out_data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _unary(x, s, s * (1.0 - s))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary(x, t, 1.0 - t * t)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _unary(x, out, (x.data > 0).astype(np.float64))


def sin(x: Tensor) -> Tensor:
    return _unary(x, np.sin(x.data), np.cos(x.data))


def cos(x: Tensor) -> Tensor:
    return _unary(x, np.cos(x.data), -np.sin(x.data))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _unary(x, e, e)


def selu(x: Tensor) -> Tensor:
    pos = x.data > 0
    e = np.exp(np.minimum(x.data, 0.0))
    out = SELU_LAMBDA * np.where(pos, x.data, SELU_ALPHA * (e - 1.0))
    dl = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * e)
    return _unary(x, out, dl)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization over the last axis with learned gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def bw(g):
        gain.accumulate(_unbroadcast(g * xhat, gain.data.shape))
        bias.accumulate(_unbroadcast(g, bias.data.shape))
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        x.accumulate(gx)

    return Tensor(out_data, (x, gain, bias), bw)


def gate3(x: Tensor, y: Tensor, f: Tensor, inner_sigmoid: bool = False) -> Tensor:
    """f*x + (1-f)*y; with inner_sigmoid, the gate is sigmoid(f) first."""
    gate = sigmoid(f) if inner_sigmoid else f
    return add(mul(gate, x), mul(sub(_as_tensor(1.0), gate), y))


def lstm_step(z: Tensor, c: Tensor) -> Tensor:
    """Fused LSTM gate update.

    ``z`` [B, 4w] holds the pre-activation gate blocks i|f|o|u and ``c``
    [B, w] the previous cell state. Returns [B, 2w] with the new hidden
    state in columns [0, w) and the new cell state in [w, 2w). Equivalent
    to the sigmoid/tanh/mul composition, collapsed into one graph node.
    """
    w = c.data.shape[-1]
    i = 1.0 / (1.0 + np.exp(-z.data[..., :w]))
    f = 1.0 / (1.0 + np.exp(-z.data[..., w : 2 * w]))
    o = 1.0 / (1.0 + np.exp(-z.data[..., 2 * w : 3 * w]))
    u = np.tanh(z.data[..., 3 * w :])
    c2 = f * c.data + i * u
    th = np.tanh(c2)
    out_data = np.concatenate([o * th, c2], axis=-1)

    def bw(g):
        gh = g[..., :w]
        gc = g[..., w:]
        dc2 = gc + gh * o * (1.0 - th * th)
        gz = np.empty_like(z.data)
        gz[..., :w] = dc2 * u * i * (1.0 - i)
        gz[..., w : 2 * w] = dc2 * c.data * f * (1.0 - f)
        gz[..., 2 * w : 3 * w] = gh * th * o * (1.0 - o)
        gz[..., 3 * w :] = dc2 * i * (1.0 - u * u)
        z.accumulate(gz)
        c.accumulate(dc2 * f)

    return Tensor(out_data, (z, c), bw)


def lstm_cell(x: Tensor, hc: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """Fused LSTM step from a packed hidden|cell state.

    ``x`` [B, w_in] is the input, ``hc`` [B, 2w] packs the previous hidden
    state in columns [0, w) and the cell state in [w, 2w); ``W`` [4w, w_in],
    ``U`` [4w, w], and ``b`` [4w] parameterize the i|f|o|u gate blocks.
    Returns the packed next state [B, 2w]. Equivalent to
    ``lstm_step(linear(x, W) + linear(h, U) + b, c)`` in a single graph node.
    """
    w = hc.data.shape[-1] // 2
    hprev = hc.data[..., :w]
    c = hc.data[..., w:]
    z = (x.data @ W.data.T + hprev @ U.data.T) + b.data
    i = 1.0 / (1.0 + np.exp(-z[..., :w]))
    f = 1.0 / (1.0 + np.exp(-z[..., w : 2 * w]))
    o = 1.0 / (1.0 + np.exp(-z[..., 2 * w : 3 * w]))
    u = np.tanh(z[..., 3 * w :])
    c2 = f * c + i * u
    th = np.tanh(c2)
    out_data = np.concatenate([o * th, c2], axis=-1)

    def bw(g):
        gh = g[..., :w]
        gc = g[..., w:]
        dc2 = gc + gh * o * (1.0 - th * th)
        gz = np.empty_like(z)
        gz[..., :w] = dc2 * u * i * (1.0 - i)
        gz[..., w : 2 * w] = dc2 * c * f * (1.0 - f)
        gz[..., 2 * w : 3 * w] = gh * th * o * (1.0 - o)
        gz[..., 3 * w :] = dc2 * i * (1.0 - u * u)
        x.accumulate(gz @ W.data)
        W.accumulate(gz.T @ x.data)
        U.accumulate(gz.T @ hprev)
        b.accumulate(gz.sum(axis=0) if gz.ndim > b.data.ndim else gz)
        hc.accumulate(np.concatenate([gz @ U.data, dc2 * f], axis=-1))

    return Tensor(out_data, (x, hc, W, U, b), bw)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        x.accumulate(s * (g - dot))

    return Tensor(s, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        x.accumulate(g - s * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; targets are integer class ids [B]."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = targets.shape[0]
    loss = -logp[np.arange(n), targets].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        logits.accumulate(g * grad / n)

    return Tensor(loss, (logits,), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for p, a, b in zip(parts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(a, b)
            p.accumulate(g[tuple(idx)])

    return Tensor(out_data, tuple(parts), bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[..., start:stop]

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x.accumulate(full)

    return Tensor(out_data, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def bw(g):
        x.accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor(out_data, (x,), bw)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def bw(g):
        x.accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return Tensor(out_data, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, E[out] = x in train mode."""
    if not train or p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate(full)

    return Tensor(out_data, (table,), bw)


def positional_encoding_table(max_len: int, dim: int) -> np.ndarray:
    """Sinusoidal timestep encoding, [max_len, dim]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_mm_weight(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def init_embedding(rng: np.random.Generator, vocab: int, dim: int) -> np.ndarray:
    return rng.uniform(-0.04, 0.04, size=(vocab, dim))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    clip_norm: Optional[float] = None
    clip_value: Optional[float] = None


class Optimizer:
    """SGD / Adam with gradient clipping applied before the update.

    `step` returns False when any parameter went non-finite, signalling
    divergence to the caller; parameters are left as-is in that case.
    """

    def __init__(self, params: Sequence[Parameter], cfg: OptimizerConfig):
        if cfg.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {cfg.kind!r}")
        if cfg.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _clip(self) -> None:
        cfg = self.cfg
        grads = [p.grad for p in self.params if p.grad is not None]
        if cfg.clip_norm is not None and grads:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > cfg.clip_norm and total > 0:
                scale = cfg.clip_norm / total
                for g in grads:
                    g *= scale
        if cfg.clip_value is not None:
            for g in grads:
                np.clip(g, -cfg.clip_value, cfg.clip_value, out=g)

    def step(self) -> bool:
        cfg = self.cfg
        self._clip()
        self._t += 1
        ok = True
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.l2:
                g = g + cfg.l2 * p.data
            if cfg.kind == "sgd":
                p.data -= self.lr * g
            else:
                m = self._m[p.name]
                v = self._v[p.name]
                m[...] = cfg.beta1 * m + (1 - cfg.beta1) * g
                v[...] = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** self._t)
                vhat = v / (1 - cfg.beta2 ** self._t)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            if not np.all(np.isfinite(p.data)):
                ok = False
        self.zero_grad()
        return ok


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central differences.

    `f` must be a deterministic scalar function of `params` (re-evaluable).
    """
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = {p.name: (np.array(p.grad) if p.grad is not None
                         else np.zeros_like(p.data)) for p in params}
    worst = 0.0
    for p in params:
        if not np.all(np.isfinite(analytic[p.name])):
            raise FloatingPointError(f"non-finite gradient for {p.name}")
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            ad = analytic[p.name].reshape(-1)[i]
            err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# checkpoints: JSON header + little-endian float64 payload
# ---------------------------------------------------------------------------

_MAGIC = b"RNDL\x01\x00"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    header = {}
    offset = 0
    for name, arr in arrays.items():
        header[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 8
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError("not a rnndsl checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    out = {}
    for name, meta in header.items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload[start:start + size * 8], dtype="<f8")
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def save_params(path, params: Sequence[Parameter]) -> None:
    save_arrays(path, {p.name: p.data for p in params})


def load_params(path, params: Sequence[Parameter]) -> None:
    arrays = load_arrays(path)
    for p in params:
        if p.name not in arrays:
            raise KeyError(f"checkpoint missing parameter {p.name}")
        if arrays[p.name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        p.data[...] = arrays[p.name]
