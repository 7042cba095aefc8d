"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is deliberately closed: exactly the primitives a
hierarchical convolutional encoder-decoder with a masked reconstruction
loss needs (convolution with groups, clipped activation, nearest
upsampling, elementwise arithmetic with broadcasting, reductions, matrix
products, dropout, softmax cross-entropy). Each operation records its
parents and a backward closure; ``Tensor.backward()`` replays the implicit
tape in reverse topological order and leaves one gradient slot per
participating tensor.

All arithmetic runs in float64. Float32 appears only as checkpoint
storage (see :mod:`spmim.training`). Every forward result is checked for
NaN/Inf; a non-finite value raises :class:`~spmim.errors.NumericsError`
instead of propagating silently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ArgumentError,
    DimensionError,
    GeometryError,
    NumericsError,
    StateError,
)

Array = np.ndarray

_grad_enabled: bool = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph construction inside the block (inference paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite value produced by {op}")


class Tensor:
    """N-dimensional float64 array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data: Array = arr
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise StateError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff --------------------------------------------------------

    def backward(self) -> None:
        """Propagate d(self)/d(node) to every tensor this value depends on.

        Requires a scalar value. Gradient slots of all reachable nodes are
        zero-initialized first, so repeated calls never accumulate across
        passes.
        """
        if self.data.size != 1:
            raise StateError("backward() requires a scalar loss node")
        if not self.requires_grad:
            raise StateError("loss does not depend on any tracked tensor")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS topological order over grad-requiring nodes."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[Array]:
    """Gradients of a scalar loss for an explicit parameter list.

    Parameters the loss does not reach receive exact zero gradients.
    """
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data: Array, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(target: Tensor, grad: Array) -> None:
    if not target.requires_grad:
        return
    if target.grad is None:
        target.grad = np.zeros_like(target.data)
    target.grad += grad


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g: Array) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g: Array) -> None:
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g: Array) -> None:
        _accumulate(a, g * (0.5 / data))

    return _make(data, (a,), backward, "sqrt")


def relu6(a) -> Tensor:
    """Clipped activation min(max(x, 0), 6)."""
    a = _as_tensor(a)
    data = np.clip(a.data, 0.0, 6.0)
    # subgradient 0 at the kinks x == 0 and x == 6
    active = (a.data > 0.0) & (a.data < 6.0)

    def backward(g: Array) -> None:
        _accumulate(a, g * active)

    return _make(data, (a,), backward, "relu6")


# -- shape and reductions -------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        _accumulate(a, g.reshape(original))

    return _make(data, (a,), backward, "reshape")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(data), (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


# -- convolution -----------------------------------------------------------


def _conv_geometry(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"conv geometry invalid: extent={extent} kernel={k} "
            f"stride={stride} padding={padding}"
        )
    return span // stride + 1


def _im2col(xp: Array, kh: int, kw: int, stride: int, groups: int):
    """Column matrix (N, groups, C/g*kh*kw, Ho*Wo) from a padded input."""
    n, cin, _, _ = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(
        n, groups, (cin // groups) * kh * kw, ho * wo
    )
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward_arrays(x: Array, w: Array, bias: Array | None = None,
                          stride: int = 1, padding: int = 0,
                          groups: int = 1) -> Array:
    """Raw-array convolution forward (no tape); same kernel as conv2d."""
    n, cin, h, wdt = x.shape
    cout = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    ho = _conv_geometry(h, kh, stride, padding)
    wo = _conv_geometry(wdt, kw, stride, padding)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols, ho, wo = _im2col(xp, kh, kw, stride, groups)
    w2 = w.reshape(groups, cout // groups, (cin // groups) * kh * kw)
    out = np.matmul(w2[None], cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, cout, 1, 1)
    return out


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Strided 2-D cross-correlation with channel groups.

    ``x`` is (N, Cin, H, W), ``w`` is (Cout, Cin/groups, kh, kw).
    ``groups == Cin`` with ``Cout == Cin`` gives a depthwise convolution.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    if stride < 1 or padding < 0 or groups < 1:
        raise ArgumentError("stride must be >= 1, padding >= 0, groups >= 1")
    n, cin, h, wdt = x.shape
    cout, cpg, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise DimensionError("channel counts must be divisible by groups")
    if cpg != cin // groups:
        raise DimensionError(
            f"weight expects {cpg} channels per group, input provides {cin // groups}"
        )
    ho = _conv_geometry(h, kh, stride, padding)
    wo = _conv_geometry(wdt, kw, stride, padding)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError("bias must have shape (Cout,)")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride, groups)
    w2 = w.data.reshape(groups, cout // groups, cpg * kh * kw)
    out = np.matmul(w2[None], cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g: Array) -> None:
        gy = g.reshape(n, groups, cout // groups, ho * wo)
        if w.requires_grad:
            dw = np.matmul(gy, cols.swapaxes(2, 3)).sum(axis=0)
            _accumulate(w, dw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.swapaxes(1, 2)[None], gy)
            dwin = dcols.reshape(n, cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[
                        :, :, i, j
                    ]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + wdt]
            _accumulate(x, dxp)

    return _make(out, parents, backward, "conv2d")


def conv2d_reference(x: Array, w: Array, bias: Array | None = None,
                     stride: int = 1, padding: int = 0, groups: int = 1) -> Array:
    """Naive sliding-window convolution, the independent oracle for conv2d.

    Plain nested loops over every output element; used by the test suite
    and kept free of the im2col machinery above.
    """
    n, cin, h, wdt = x.shape
    cout, cpg, kh, kw = w.shape
    ho = _conv_geometry(h, kh, stride, padding)
    wo = _conv_geometry(wdt, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo))
    cog = cout // groups
    for b in range(n):
        for o in range(cout):
            grp = o // cog
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cpg):
                        for p in range(kh):
                            for q in range(kw):
                                acc += (
                                    xp[b, grp * cpg + c, i * stride + p, j * stride + q]
                                    * w[o, c, p, q]
                                )
                    out[b, o, i, j] = acc
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
    return out


# -- resampling ------------------------------------------------------------


def upsample_nearest2x(x) -> Tensor:
    """Replicate each pixel of an (N, C, H, W) tensor into a 2x2 block."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("upsample_nearest2x expects a 4-D tensor")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g: Array) -> None:
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, (x,), backward, "upsample_nearest2x")


# -- stochastic and loss ops ------------------------------------------------


def dropout(x, p: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and rescales."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ArgumentError("train-mode dropout requires an explicit RNG")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    data = x.data * keep

    def backward(g: Array) -> None:
        _accumulate(x, g * keep)

    return _make(data, (x,), backward, "dropout")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (N, K) logits")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError("labels must be a length-N vector")
    if labels.min() < 0 or labels.max() >= k:
        raise ArgumentError("labels out of range for logit width")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    zsum = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(zsum)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean())

    def backward(g: Array) -> None:
        p = ez / zsum
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / n)

    return _make(loss, (logits,), backward, "cross_entropy")


# -- gradient-check oracle ---------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], float | Tensor], x: Tensor,
                           h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function at x.

    Perturbs one coordinate at a time and never consults the autodiff
    tape, so it stays an independent oracle for backward().
    """
    base = x.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    _check_finite(grad, "finite_difference_grad")
    return Tensor(grad)
