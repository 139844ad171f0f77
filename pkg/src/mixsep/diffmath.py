"""Minimal reverse-mode differentiable array engine on top of numpy.

Every feature map, similarity volume and parameter in the package is a
:class:`Tensor`.  Operations record a closure that scatters the output
gradient back into their inputs; :meth:`Tensor.backward` walks the graph in
reverse topological order.

Storage is float32 by default.  Passing ``dtype=np.float64`` keeps a tensor in
64-bit, which is what :func:`finite_diff_check` uses for its reference path.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "elementwise",
    "reduce",
    "matmul",
    "log_softmax",
    "channelwise_layernorm",
    "concat",
    "stack",
    "finite_diff_check",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TensorFileError(OSError):
    """A tensor container file is truncated or malformed."""


def _as_array(data, dtype) -> np.ndarray:
    """Storage is float32 unless float64 is asked for explicitly."""
    if dtype is None:
        dtype = np.float32
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported tensor dtype {dtype}")
    # asarray keeps 0-d shapes, which ascontiguousarray would promote to (1,)
    return np.asarray(data, dtype=dtype, order="C")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with an optional gradient buffer and a backward closure."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple["Tensor", ...] = (), _op: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph plumbing ----------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` of every reachable tensor that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _lift(other, self.dtype), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _lift(other, self.dtype), self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __getitem__(self, index):
        return _getitem(self, index)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def relu(self):
        return elementwise("relu", self)

    def square(self):
        return elementwise("square", self)

    def abs(self):
        return elementwise("abs", self)

    def clamp_min(self, lo: float):
        return elementwise("clamp-min", self, lo)

    def sum(self, axes=None, keep: bool = False):
        return reduce("sum", self, axes, keep)

    def mean(self, axes=None, keep: bool = False):
        return reduce("mean", self, axes, keep)

    def max(self, axes=None, keep: bool = False):
        return reduce("max", self, axes, keep)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    def take(self, flat_index: np.ndarray):
        return _take(self, flat_index)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype,
                 _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_UNARY = {"exp", "log", "relu", "square", "abs"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Apply an elementwise operation.

    ``op`` is one of add, sub, mul, div, scalar-mul, exp, log, relu,
    clamp-min, square, abs.  Binary operands follow numpy broadcasting;
    incompatible shapes raise :class:`ShapeError` naming both shapes.
    """
    if not isinstance(a, Tensor):
        a = _lift(a, None)
    if op in _UNARY:
        return _unary(op, a)
    if op == "clamp-min":
        lo = float(b)
        x = a.data
        out = np.maximum(x, np.asarray(lo, dtype=x.dtype))
        return _make(out, (a,), op, lambda g: ((a, g * (x > lo)),))
    if op == "scalar-mul":
        s = float(b)
        out = a.data * np.asarray(s, dtype=a.dtype)
        return _make(out, (a,), op, lambda g: ((a, g * s),))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = _lift(b, a.dtype)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    x, y = a.data, b.data
    if op == "add":
        out = x + y

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
    elif op == "sub":
        out = x - y

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))
    elif op == "mul":
        out = x * y

        def bw(g):
            return ((a, _unbroadcast(g * y, a.shape) if a.requires_grad else None),
                    (b, _unbroadcast(g * x, b.shape) if b.requires_grad else None))
    else:
        out = x / y

        def bw(g):
            ga = _unbroadcast(g / y, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * x / (y * y), b.shape) if b.requires_grad else None
            return ((a, ga), (b, gb))
    assert out.shape == shape
    return _make(out, (a, b), op, bw)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "exp":
        out = np.exp(x)
        return _make(out, (a,), op, lambda g: ((a, g * out),))
    if op == "log":
        out = np.log(x)
        return _make(out, (a,), op, lambda g: ((a, g / x),))
    if op == "relu":
        out = np.maximum(x, 0)
        return _make(out, (a,), op, lambda g: ((a, g * (x > 0)),))
    if op == "square":
        out = x * x
        return _make(out, (a,), op, lambda g: ((a, 2 * g * x),))
    out = np.abs(x)
    return _make(out, (a,), op, lambda g: ((a, g * np.sign(x)),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axes=None, keep: bool = False) -> Tensor:
    """Reduce ``a`` over ``axes`` with sum, mean or max.

    Max routes the whole incoming gradient of each reduced group to the first
    maximal element in row-major order over the reduced axes.
    """
    ax = _norm_axes(axes, a.ndim)
    if any(a.shape[i] == 0 for i in ax) or (a.size == 0):
        raise ShapeError(f"{op}: empty reduction group for shape {a.shape}, axes {ax}")
    x = a.data
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))
    if op == "sum":
        out = x.sum(axis=ax, keepdims=keep)

        def bw(g):
            return ((a, np.broadcast_to(g.reshape(kept_shape), a.shape).copy()),)
    elif op == "mean":
        count = int(np.prod([a.shape[i] for i in ax]))
        out = x.mean(axis=ax, keepdims=keep)

        def bw(g):
            return ((a, np.broadcast_to(g.reshape(kept_shape) / count, a.shape).copy()),)
    elif op == "max":
        rest = tuple(i for i in range(a.ndim) if i not in ax)
        perm = rest + ax
        moved = x.transpose(perm)
        rest_shape = tuple(a.shape[i] for i in rest)
        group = int(np.prod([a.shape[i] for i in ax]))
        flat = moved.reshape(rest_shape + (group,))
        idx = flat.argmax(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out = vals.reshape(kept_shape) if keep else vals

        def bw(g):
            gf = np.zeros(rest_shape + (group,), dtype=x.dtype)
            np.put_along_axis(gf, idx[..., None], g.reshape(rest_shape)[..., None], axis=-1)
            inv = np.argsort(perm)
            return ((a, gf.reshape(moved.shape).transpose(inv)),)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.asarray(out, dtype=x.dtype)
    return _make(out, (a,), op, bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def _reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: ((a, g.reshape(a.shape)),))


def _transpose(a: Tensor, axes) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = np.asarray(a.data.transpose(axes), order="C")
    inv = np.argsort(axes)
    return _make(out, (a,), "transpose", lambda g: ((a, g.transpose(inv)),))


def _getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], dtype=a.dtype, copy=True)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is Ellipsis or i is None or isinstance(i, (int, np.integer, slice)) for i in idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return ((a, full),)
    return _make(out, (a,), "getitem", bw)


def _take(a: Tensor, flat_index: np.ndarray) -> Tensor:
    flat_index = np.asarray(flat_index, dtype=np.int64)
    out = a.data.reshape(-1)[flat_index]

    def bw(g):
        full = np.zeros(a.size, dtype=a.dtype)
        np.add.at(full, flat_index, g)
        return ((a, full.reshape(a.shape)),)
    return _make(out, (a,), "take", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple((t, p) for t, p in zip(tensors, parts))
    return _make(out, tuple(tensors), "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple((t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors))
    return _make(out, tuple(tensors), "stack", bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading axes.

    Gradients are ``g @ b.T`` and ``a.T @ g`` (summed over broadcast batches).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = np.matmul(x, y)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))
    return _make(out, (a, b), "matmul", bw)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log-softmax via the max-shifted log-sum-exp."""
    x = logits.data
    shift = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=axis, keepdims=True))
    out = shift - lse
    soft = np.exp(out)

    def bw(g):
        return ((logits, g - soft * g.sum(axis=axis, keepdims=True)),)
    return _make(out, (logits,), "log_softmax", bw)


def channelwise_layernorm(x: Tensor, axis: int, gain: Tensor, bias: Tensor,
                          eps: float = 1e-5) -> Tensor:
    """Normalise every position over the channel ``axis``, then apply gain/bias.

    A constant channel vector normalises to zero, so the output is ``bias``.
    """
    axis = axis % x.ndim
    n = x.shape[axis]
    if n < 1:
        raise ShapeError("channel extent must be >= 1")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"gain/bias shapes {gain.shape}/{bias.shape} do not match channel extent {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xc * inv
    gw = gain.data.reshape(bshape)
    out = xhat * gw + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gw
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        return ((x, gx), (gain, ggain), (bias, gbias))
    return _make(out.astype(xd.dtype, copy=False), (x, gain, bias), "layernorm", bw)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor],
                      eps: float = 1e-3, coords: int | None = None,
                      seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``x`` may be one tensor or a sequence of tensors passed positionally to
    ``f``.  Both paths run in float64.  Returns the maximum over checked
    coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    When ``coords`` is given, only that many randomly chosen coordinates per
    input are perturbed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    base = [np.array(t.data, dtype=np.float64) for t in xs]
    leaves = [Tensor(b, requires_grad=True, dtype=np.float64) for b in base]
    out = f(*leaves)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, b in enumerate(base):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(b)
        flat_idx = np.arange(b.size)
        if coords is not None and coords < b.size:
            flat_idx = np.sort(rng.choice(b.size, size=coords, replace=False))
        for i in flat_idx:
            vals = []
            for sign in (1.0, -1.0):
                pert = [bb.copy() for bb in base]
                pert[k].reshape(-1)[i] += sign * eps
                y = float(f(*[Tensor(p, dtype=np.float64) for p in pert]).data.reshape(-1)[0])
                if not math.isfinite(y):
                    raise FloatingPointError(
                        f"non-finite evaluation at input {k}, coordinate "
                        f"{np.unravel_index(i, b.shape)}")
                vals.append(y)
            numeric = (vals[0] - vals[1]) / (2 * eps)
            an = float(analytic.reshape(-1)[i])
            err = abs(an - numeric) / max(1e-8, abs(an) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# tensor container files
# ---------------------------------------------------------------------------

_MAGIC = "tensor v1 f32"


def save_tensor(path: str | Path, data) -> None:
    """Write ``data`` as an ASCII header line followed by little-endian f32."""
    arr = data.data if isinstance(data, Tensor) else np.asarray(data)
    arr = np.asarray(arr, dtype="<f4", order="C")
    header = " ".join([_MAGIC, str(arr.ndim), *map(str, arr.shape)]) + "\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            header = fh.readline().decode("ascii").split()
            if " ".join(header[:3]) != _MAGIC:
                raise TensorFileError(f"{path}: not a tensor container file")
            rank = int(header[3])
            shape = tuple(int(d) for d in header[4:4 + rank])
        except (UnicodeDecodeError, IndexError, ValueError) as exc:
            raise TensorFileError(f"{path}: unreadable header ({exc})") from exc
        if len(shape) != rank:
            raise TensorFileError(f"{path}: header rank {rank} but {len(shape)} extents")
        payload = fh.read()
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 4 * count:
        raise TensorFileError(f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
