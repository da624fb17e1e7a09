"""Reverse-mode automatic differentiation over dense float64 arrays.

A small eager tape: every primitive op returns a new :class:`Tensor` that
remembers its operands and a local adjoint rule. ``Graph.build(output)``
topologically sorts the recorded ops and ``Graph.backward()`` applies the
chain rule once per node, accumulating into ``Tensor.grad``.

Also home to the Adam optimizer with exponential learning-rate decay and
the binary checkpoint container used for all parameter serialization.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeMismatch",
    "DiffcoreError",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "affine",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "sin",
    "cos",
    "power",
    "sum_reduce",
    "mean_reduce",
    "cumsum",
    "concatenate",
    "reshape",
    "transpose",
    "backward",
    "OptimizerState",
    "adam_step",
    "lr_at",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


class DiffcoreError(Exception):
    pass


class ShapeMismatch(DiffcoreError):
    """Operand shapes are incompatible for the op that raised."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array plus an optional same-shape gradient.

    ``requires_grad`` marks leaves that should receive adjoints; interior
    nodes produced by ops propagate gradient whenever any operand does.
    Gradient arrays are allocated lazily on first accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents=(), _vjp=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: operands {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, op="add", _parents=(a, b))
    if _needs_grad(a, b):
        out._vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, op="sub", _parents=(a, b))
    if _needs_grad(a, b):
        out._vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, op="mul", _parents=(a, b))
    if _needs_grad(a, b):
        out._vjp = lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape))
    return out


def neg(a) -> Tensor:
    a = _tensor(a)
    out = Tensor(-a.data, op="neg", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (-g,)
    return out


def matmul(a, b) -> Tensor:
    """1-D or 2-D matrix product; higher ranks are not supported."""
    a, b = _tensor(a), _tensor(b)
    if not (1 <= a.data.ndim <= 2 and 1 <= b.data.ndim <= 2) \
            or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, op="matmul", _parents=(a, b))
    if _needs_grad(a, b):
        def vjp(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                return g * bd, g * ad
            if ad.ndim == 1:                 # (k,) @ (k, n) -> (n,)
                return bd @ g, np.outer(ad, g)
            if bd.ndim == 1:                 # (m, k) @ (k,) -> (m,)
                return np.outer(g, bd), ad.T @ g
            return g @ bd.T, ad.T @ g
        out._vjp = vjp
    return out


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b for 2-D x, the hot path of MLP layers."""
    x, w, b = _tensor(x), _tensor(w), _tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1 \
            or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"affine: {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor(x.data @ w.data + b.data, op="affine", _parents=(x, w, b))
    if _needs_grad(x, w, b):
        def vjp(g):
            return g @ w.data.T, x.data.T @ g, g.sum(axis=0)
        out._vjp = vjp
    return out


def relu(a) -> Tensor:
    a = _tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), op="relu", _parents=(a,))
    if _needs_grad(a):
        mask = a.data > 0.0
        out._vjp = lambda g: (g * mask,)
    return out


def sigmoid(a) -> Tensor:
    a = _tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, op="sigmoid", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (g * s * (1.0 - s),)
    return out


def softplus(a) -> Tensor:
    # log(1 + e^x), computed stably; derivative is sigmoid(x)
    a = _tensor(a)
    x = a.data
    val = np.logaddexp(0.0, x)
    out = Tensor(val, op="softplus", _parents=(a,))
    if _needs_grad(a):
        sig = 1.0 / (1.0 + np.exp(-x))
        out._vjp = lambda g: (g * sig,)
    return out


def exp(a) -> Tensor:
    a = _tensor(a)
    e = np.exp(a.data)
    out = Tensor(e, op="exp", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (g * e,)
    return out


def sin(a) -> Tensor:
    a = _tensor(a)
    out = Tensor(np.sin(a.data), op="sin", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (g * np.cos(a.data),)
    return out


def cos(a) -> Tensor:
    a = _tensor(a)
    out = Tensor(np.cos(a.data), op="cos", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (-g * np.sin(a.data),)
    return out


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = _tensor(a)
    out = Tensor(a.data ** p, op=f"power({p})", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (g * p * a.data ** (p - 1.0),)
    return out


def sum_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), op="sum", _parents=(a,))
    if _needs_grad(a):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)
        out._vjp = vjp
    return out


def mean_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), op="mean", _parents=(a,))
    if _needs_grad(a):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / n, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg / n, a.shape).copy(),)
        out._vjp = vjp
    return out


def cumsum(a, axis: int = -1) -> Tensor:
    a = _tensor(a)
    out = Tensor(np.cumsum(a.data, axis=axis), op="cumsum", _parents=(a,))
    if _needs_grad(a):
        def vjp(g):
            rev = np.flip(g, axis=axis)
            return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)
        out._vjp = vjp
    return out


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeMismatch(f"concatenate: {tensors[0].shape} vs {t.shape} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 op="concatenate", _parents=tuple(tensors))
    if _needs_grad(*tensors):
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        out._vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def reshape(a, shape) -> Tensor:
    a = _tensor(a)
    out = Tensor(a.data.reshape(shape), op="reshape", _parents=(a,))
    if _needs_grad(a):
        out._vjp = lambda g: (g.reshape(a.shape),)
    return out


def transpose(a, axes) -> Tensor:
    a = _tensor(a)
    out = Tensor(np.transpose(a.data, axes), op="transpose", _parents=(a,))
    if _needs_grad(a):
        inv = np.argsort(axes)
        out._vjp = lambda g: (np.transpose(g, inv),)
    return out


# ---------------------------------------------------------------------------
# backward pass


class Graph:
    """Topologically ordered recording of the ops reachable from an output.

    Operands always precede consumers in ``nodes``; the backward sweep
    visits each node exactly once.
    """

    __slots__ = ("output", "nodes")

    def __init__(self, output: Tensor, nodes):
        self.output = output
        self.nodes = nodes

    @classmethod
    def build(cls, output: Tensor) -> "Graph":
        nodes, visited = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(output, nodes)

    def backward(self) -> None:
        out = self.output
        if out.size != 1:
            raise DiffcoreError(f"backward requires a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every requires_grad leaf."""
    Graph.build(output).backward()


# ---------------------------------------------------------------------------
# Adam optimizer with exponential learning-rate decay


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from lr_start to lr_end over total_steps, then flat."""
    if total_steps == 0:
        raise DiffcoreError("lr_at: total_steps must be positive")
    if step < 0 or lr_start <= 0.0 or lr_end <= 0.0:
        raise DiffcoreError("lr_at: step must be >= 0 and rates positive")
    frac = min(step, total_steps) / total_steps
    return lr_start * (lr_end / lr_start) ** frac


class OptimizerState:
    """Bias-corrected Adam moments for a named set of parameter tensors."""

    def __init__(self, params: dict[str, Tensor], total_steps: int,
                 lr_start: float = 1e-3, lr_end: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0
        self.total_steps = total_steps
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def lr(self) -> float:
        return lr_at(self.step_count, self.total_steps, self.lr_start, self.lr_end)


def adam_step(state: OptimizerState, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """One in-place Adam update using each tensor's accumulated gradient.

    A parameter whose grad is None is treated as having a zero gradient;
    its moments still decay.
    """
    lr = state.lr()
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise DiffcoreError(f"adam_step: non-finite gradient in parameter block {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# checkpoint container
#
# 16-byte header: 8-byte magic "HG3FCKPT" + u64 LE version.
# Then per block: u32 LE name length, UTF-8 name, u32 LE rank,
# rank * u64 LE extents, row-major little-endian float64 payload.

CHECKPOINT_MAGIC = b"HG3FCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, blocks: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays atomically (temp file + rename)."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", CHECKPOINT_VERSION))
        for name, arr in blocks.items():
            a = np.asarray(arr, dtype="<f8", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            for extent in a.shape:
                f.write(struct.pack("<Q", extent))
            f.write(a.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DiffcoreError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<Q", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise DiffcoreError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            payload = f.read(count * 8)
            if len(payload) != count * 8:
                raise DiffcoreError(f"{path}: truncated block {name!r}")
            blocks[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return blocks
