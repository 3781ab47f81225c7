"""Minimal dense tensor engine with reverse-mode autodiff.

Values are float64 numpy arrays; the tape is rebuilt every forward pass
(define-by-run). Checkpoints store float32 payloads in the RAET format.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtri


class Tensor:
    """Dense n-dimensional array participating in a gradient tape.

    `data` is always float64. `grad` is allocated lazily on the first
    backward pass and accumulates additively across uses.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # ------------------------------------------------------------------
    # tape plumbing

    def _needs_tape(self, *others: "Tensor") -> bool:
        return self.requires_grad or any(o.requires_grad for o in others)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of every reachable requires_grad tensor.

        The loss must be scalar; gradients accumulate additively, so call
        `zero_grad` on parameters between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # operators

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if backward is not None and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents) or any(
            p._parents for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bwd)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bwd(g):
        a._accumulate(2.0 * a.data * g)

    return _make(data, (a,), bwd)


def tabs(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bwd(g):
        a._accumulate(np.sign(a.data) * g)

    return _make(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(0.5 / data * g)

    return _make(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        a._accumulate(data * g)

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        a._accumulate((1.0 - data * data) * g)

    return _make(data, (a,), bwd)


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU."""
    x = a.data
    x2 = x * x
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def bwd(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        da = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        a._accumulate(da * g)

    return _make(data, (a,), bwd)


# ----------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(old))

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), bwd)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop] along the last axis."""
    data = a.data[..., start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a._accumulate(full)

    return _make(data, (a,), bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(g[..., lo:hi])

    return _make(data, tuple(parts), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add gradient to the table."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(data, (table,), bwd)


# ----------------------------------------------------------------------
# reductions and contractions


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction over the last axis of `a` / second-to-last of `b`."""
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.data.ndim > 1 \
            else np.multiply.outer(g, b.data)
        a._accumulate(_unbroadcast(ga, a.shape))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted) along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _make(data, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    d = x.shape[-1]

    def bwd(g):
        gg = g * gain.data
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        a._accumulate(dx)
        red = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=red))
        bias._accumulate(g.sum(axis=red))

    return _make(data, (a, gain, bias), bwd)


# ----------------------------------------------------------------------
# seeded randomness

_U53 = 1 << 53


def derive_seed(seed: int, *tags) -> int:
    """Stable 64-bit child seed from a parent seed and hashable tags."""
    import hashlib

    h = hashlib.blake2b(repr((int(seed),) + tags).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the only RNG used anywhere."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def seeded_normal(shape, seed: int) -> Tensor:
    """Deterministic standard normals: Philox uniforms through the inverse
    normal CDF. Same (shape, seed) gives bit-identical output."""
    g = rng(seed)
    u = (g.integers(0, _U53, size=shape).astype(np.float64) + 0.5) / _U53
    return Tensor(ndtri(u))


# ----------------------------------------------------------------------
# optimizer


class OptimizerState:
    """AdamW moments plus hyperparameters for one parameter set."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.95),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ValueError(f"betas must lie in (0,1), got {betas}")
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps


def adamw_step(state: OptimizerState, lr: float | None = None):
    """One decoupled-weight-decay Adam step over state.params (in place)."""
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# RAET checkpoint format

_MAGIC = b"RAET"
_VERSION = 1


def save_checkpoint(path, entries: dict[str, np.ndarray] | dict[str, Tensor]):
    """Write named arrays as float32 in the RAET container."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            if isinstance(arr, Tensor):
                arr = arr.data
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", 0, arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a RAET container; returns float32 arrays keyed by name."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a RAET checkpoint")
        version, = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        count, = struct.unpack("<I", f.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            nlen, = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            dtype_code, ndim = struct.unpack("<BB", f.read(2))
            if dtype_code != 0:
                raise ValueError(f"{path}: unknown dtype code {dtype_code}")
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
        return out
