"""A small reverse-mode autodiff engine over (batch, channels, vertices) arrays.

Only the operations the mesh models need are provided. Every op records a
node on the active :class:`Tape`; ``Tape.backward`` walks the nodes in
reverse insertion order. Outside a tape, ops run forward only.
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path

import numpy as np
import scipy.sparse as sp

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_CKPT_MAGIC = b"FICKPT01"
_KIND_PARAM = 0
_KIND_BUFFER = 1

_state = threading.local()


class AutogradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, s):
        return scale(self, s)


class Tape:
    """Append-only record of ops. Use as a context manager."""

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def record(self, out: Tensor, inputs, backward):
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad=None):
        if not any(node[0] is loss for node in self.nodes):
            raise AutogradError("backward called on a tensor this tape never produced")
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for out, inputs, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, fn(out.grad)):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise AutogradError(f"gradient shape {g.shape} != input shape {inp.data.shape}")
                inp.grad = g if inp.grad is None else inp.grad + g


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward) -> Tensor:
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- ops ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def matmul(w, x) -> Tensor:
    """Channel mixing: (C_out, C_in) weights applied to (B, C_in, V)."""
    w, x = _as_tensor(w), _as_tensor(x)
    if w.data.ndim != 2 or x.data.ndim != 3 or w.shape[1] != x.shape[1]:
        raise AutogradError(f"matmul shape mismatch: {w.shape} x {x.shape}")
    out = np.einsum("oc,bcv->bov", w.data, x.data)

    def backward(g):
        return np.einsum("bov,bcv->oc", g, x.data), np.einsum("oc,bov->bcv", w.data, g)

    return _make(out, (w, x), backward)


def sparse_matvec(op, x) -> Tensor:
    """Apply a sparse (R x V) matrix along the vertex axis of (B, C, V) -> (B, C, R)."""
    x = _as_tensor(x)
    m = op.matrix if hasattr(op, "matrix") else sp.csr_matrix(op)
    b, c, v = x.shape
    if m.shape[1] != v:
        raise AutogradError(f"operator expects {m.shape[1]} vertices, got {v}")
    flat = x.data.reshape(b * c, v)
    out = np.asarray((m @ flat.T).T).reshape(b, c, m.shape[0])
    mt = m.T.tocsr()

    def backward(g):
        gf = g.reshape(b * c, m.shape[0])
        return (np.asarray((mt @ gf.T).T).reshape(b, c, v),)

    return _make(out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def pad_vertices(x, n_total: int) -> Tensor:
    """Zero-extend the vertex axis of (B, C, V) to n_total."""
    x = _as_tensor(x)
    b, c, v = x.shape
    if n_total < v:
        raise AutogradError("pad target smaller than input")
    out = np.zeros((b, c, n_total))
    out[:, :, :v] = x.data
    return _make(out, (x,), lambda g: (g[:, :, :v].copy(),))


def fold_groups(x, groups: int) -> Tensor:
    """(B, F, V) -> (B, F/groups, groups*V); channel g*F'+c lands at column g*V+v of row c."""
    x = _as_tensor(x)
    b, f, v = x.shape
    if f % groups:
        raise AutogradError(f"{f} channels not divisible into {groups} groups")
    fp = f // groups
    out = x.data.reshape(b, groups, fp, v).transpose(0, 2, 1, 3).reshape(b, fp, groups * v)

    def backward(g):
        return (g.reshape(b, fp, groups, v).transpose(0, 2, 1, 3).reshape(b, f, v),)

    return _make(out, (x,), backward)


def gather_rows(x, idx) -> Tensor:
    """Select vertex columns ``idx`` from (B, C, V)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[-1]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None), slice(None), idx), g)
        return (full,)

    if idx.size == n and np.array_equal(idx, np.arange(n)):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    return _make(x.data[:, :, idx], (x,), backward)


def scatter_mean_pairs(x, a, b) -> Tensor:
    """Output column k = (x[..., a[k]] + x[..., b[k]]) / 2; backward halves to both parents."""
    x = _as_tensor(x)
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n = x.shape[-1]
    route = sp.csr_matrix(
        (np.full(2 * a.size, 0.5), (np.concatenate([a, b]), np.tile(np.arange(a.size), 2))),
        shape=(n, a.size),
    )
    out = 0.5 * (x.data[:, :, a] + x.data[:, :, b])
    bsz, c, _ = x.shape

    def backward(g):
        gf = g.reshape(bsz * c, a.size)
        return (np.asarray((route @ gf.T).T).reshape(bsz, c, n),)

    return _make(out, (x,), backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over batch and vertex axes.

    In training mode the running buffers (plain arrays) are updated in place.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    g_ = gamma.data[None, :, None]
    b_ = beta.data[None, :, None]
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None]) * inv[None, :, None]

        def backward_eval(g):
            return (
                g * g_ * inv[None, :, None],
                (g * xhat).sum(axis=(0, 2)),
                g.sum(axis=(0, 2)),
            )

        return _make(xhat * g_ + b_, (x, gamma, beta), backward_eval)

    n = x.shape[0] * x.shape[2]
    mean = x.data.mean(axis=(0, 2))
    var = x.data.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (n / max(n - 1, 1))

    def backward(g):
        dxhat = g * g_
        dx = (
            inv[None, :, None]
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        )
        return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return _make(xhat * g_ + b_, (x, gamma, beta), backward)


def vertex_mean(x) -> Tensor:
    """(B, C, V) -> (B, C, 1) mean over vertices."""
    x = _as_tensor(x)
    v = x.shape[-1]
    return _make(x.data.mean(axis=-1, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / v, x.shape).copy(),))


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise AutogradError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _make(
        np.array((diff * diff).sum() / n),
        (pred, target),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


# -- parameters and optimizers ------------------------------------------------


class ParamStore:
    """Named trainable tensors with Adam state, plus non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.array(value, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name):
        return self.params[name] if name in self.params else self.buffers[name]

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def load_from(self, other: "ParamStore"):
        """Copy values (not Adam state) from another store with the same layout."""
        for name, t in self.params.items():
            t.data[...] = other.params[name].data
        for name, b in self.buffers.items():
            b[...] = other.buffers[name]


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    missing = [n for n, t in params.params.items() if t.grad is None]
    if missing:
        raise AutogradError(f"no gradient for parameter(s): {', '.join(missing)}")
    for name, t in params.params.items():
        g = t.grad
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.steps[name] += 1
        step = params.steps[name]
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params: ParamStore, lr: float) -> None:
    for t in params.params.values():
        if t.grad is not None:
            t.data -= lr * t.grad


def save_checkpoint(params: ParamStore, path) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        for kind, items in ((_KIND_PARAM, params.params.items()), (_KIND_BUFFER, params.buffers.items())):
            for name, value in items:
                arr = value.data if kind == _KIND_PARAM else value
                zeros = np.zeros_like(arr)
                m = params.adam_m.get(name, zeros) if kind == _KIND_PARAM else zeros
                v = params.adam_v.get(name, zeros) if kind == _KIND_PARAM else zeros
                step = params.steps.get(name, 0) if kind == _KIND_PARAM else 0
                raw = name.encode()
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<BB", kind, arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                for a in (arr, m, v):
                    f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
                f.write(struct.pack("<Q", step))


def load_checkpoint(path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:8] != _CKPT_MAGIC:
        raise AutogradError(f"{path}: not a checkpoint")
    off = 8
    store = ParamStore()
    while off < len(data):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        kind, rank = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(data, "<f8", size, off).reshape(shape).copy())
            off += 8 * size
        (step,) = struct.unpack_from("<Q", data, off)
        off += 8
        if kind == _KIND_PARAM:
            t = store.add(name, arrays[0])
            store.adam_m[name] = arrays[1]
            store.adam_v[name] = arrays[2]
            store.steps[name] = int(step)
            t.data = arrays[0]
        else:
            store.add_buffer(name, arrays[0])
    return store
