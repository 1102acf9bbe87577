"""Dense numpy arrays with reverse-mode automatic differentiation.

Only the operations needed by the audiovisual CPC model are provided. Arrays
may carry leading batch axes; the only implicit broadcasting is a trailing
vector (bias, gain) added across those leading axes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "InsufficientLengthError",
    "set_precision",
    "get_dtype",
    "precision",
    "tensor",
    "matmul",
    "conv1d",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "concat",
    "attention_block",
    "init_attention_params",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A forward or backward value left the finite reals."""


class InsufficientLengthError(ValueError):
    """A sequence is shorter than an operation's window."""


_DTYPES = {"64": np.float64, "32": np.float32}
_dtype = np.float64


def set_precision(bits) -> None:
    """Set the global floating point width (``64`` or ``32``)."""
    global _dtype
    key = str(bits).replace("float", "")
    if key not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")
    _dtype = _DTYPES[key]


def get_dtype():
    return _dtype


@contextmanager
def precision(bits):
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if previous is np.float64 else 32)


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    """An array node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op=""):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; seeds with ones when ``grad`` is None."""
        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        if seed.shape != self.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != {self.shape}")
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            if node.requires_grad:
                node._accumulate(g)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                _check_finite(pg, f"backward of {node.op}")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_item(t):
    raise DimensionError(f"item() needs a single element, shape is {t.shape}")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sums over the leading axes that were broadcast
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra < 0 or g.shape[extra:] != shape:
        raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g.sum(axis=tuple(range(extra)))


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    short, long_ = (a, b) if a.ndim <= b.ndim else (b, a)
    if long_.shape[long_.ndim - short.ndim:] != short.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        n = x.shape[-1]
        gx = g * gain.data if gain is not None else g
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        out = [dx]
        if gain is not None:
            out.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            out.append(_unbroadcast(g, bias.shape))
        return tuple(out)

    out = xhat
    parents = [a]
    if gain is not None:
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)
    return _make(out, parents, backward, "layer_norm")


# ---------------------------------------------------------------- structural


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(data, tensors, backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes.

    A 2-D right operand is shared across the batch of the left operand.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise DimensionError("matmul: right operand has more batch axes than left")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Strided cross-correlation along time.

    ``x`` is ``(..., T, Cin)``, ``kernel`` is ``(W, Cin, Cout)``; the result is
    ``(..., T', Cout)`` with ``T' = (T - W) // stride + 1``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if stride < 1:
        raise ValueError("stride must be positive")
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    width, cin, cout = kernel.shape
    t_in = x.shape[-2]
    if t_in < width:
        raise InsufficientLengthError(f"conv1d: length {t_in} shorter than kernel width {width}")
    t_out = (t_in - width) // stride + 1
    lead = x.shape[:-2]
    xd = x.data.reshape((-1, t_in, cin))
    nb = xd.shape[0]
    s0, s1, s2 = xd.strides
    windows = np.lib.stride_tricks.as_strided(
        xd, shape=(nb, t_out, width, cin), strides=(s0, s1 * stride, s1, s2), writeable=False
    )
    cols = windows.reshape(nb * t_out, width * cin)
    kmat = kernel.data.reshape(width * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (t_out, cout))

    def backward(g):
        g2 = g.reshape(nb * t_out, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ kmat.T).reshape(nb, t_out, width, cin)
        gx = np.zeros_like(xd)
        span = stride * (t_out - 1) + 1
        for w in range(width):
            gx[:, w : w + span : stride, :] += gcols[:, :, w, :]
        grads = [gx.reshape(x.shape), gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv1d")


# ---------------------------------------------------------------- transformer layer


def init_attention_params(dim: int, heads: int, ffn_mult: int, rng: np.random.Generator, prefix: str = "") -> dict:
    """Parameters for one pre-norm transformer layer."""
    if dim % heads:
        raise DimensionError(f"embedding size {dim} not divisible by {heads} heads")
    hidden = dim * ffn_mult

    def w(fan_in, fan_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)

    def z(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def o(n):
        return Tensor(np.ones(n), requires_grad=True)

    return {
        prefix + "ln1_g": o(dim),
        prefix + "ln1_b": z(dim),
        prefix + "wq": w(dim, dim),
        prefix + "wk": w(dim, dim),
        prefix + "wv": w(dim, dim),
        prefix + "wo": w(dim, dim),
        prefix + "bo": z(dim),
        prefix + "ln2_g": o(dim),
        prefix + "ln2_b": z(dim),
        prefix + "w1": w(dim, hidden),
        prefix + "b1": z(hidden),
        prefix + "w2": w(hidden, dim),
        prefix + "b2": z(dim),
    }


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, steps, dim = t.shape
    t = reshape(t, tuple(lead) + (steps, heads, dim // heads))
    n = len(lead)
    return transpose(t, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, heads, steps, hd = t.shape
    n = len(lead)
    t = transpose(t, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(t, tuple(lead) + (steps, heads * hd))


def attention_block(
    x: Tensor, params: dict, heads: int, causal: bool, prefix: str = "", return_weights: bool = False
):
    """One pre-norm transformer layer on ``(..., T, D)`` input.

    LN -> multi-head scaled dot-product attention -> residual -> LN ->
    two-layer GELU feed-forward -> residual.
    """
    p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    dim = x.shape[-1]
    if dim % heads:
        raise DimensionError(f"embedding size {dim} not divisible by {heads} heads")
    steps = x.shape[-2]
    hd = dim // heads

    h = layer_norm(x, p["ln1_g"], p["ln1_b"])
    q = _split_heads(matmul(h, p["wq"]), heads)
    k = _split_heads(matmul(h, p["wk"]), heads)
    v = _split_heads(matmul(h, p["wv"]), heads)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(hd))
    if causal:
        mask = np.triu(np.full((steps, steps), -1e30), k=1)
        scores = add(scores, Tensor(mask))
    weights = softmax(scores, axis=-1)
    attended = _merge_heads(matmul(weights, v))
    x = add(x, add(matmul(attended, p["wo"]), p["bo"]))

    h = layer_norm(x, p["ln2_g"], p["ln2_b"])
    h = gelu(add(matmul(h, p["w1"]), p["b1"]))
    out = add(x, add(matmul(h, p["w2"]), p["b2"]))
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    ``f`` rebuilds the scalar graph from the current values of ``params``.
    Numeric gradients use the five-point central stencil, so truncation error
    is O(eps**4) and a step large enough to keep round-off small can be used.
    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for step in (eps, -eps, 2 * eps, -2 * eps):
                flat[i] = orig + step
                vals.append(float(f().data))
            flat[i] = orig
            numeric = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
