"""Dense float64 tensors with reverse-mode differentiation.

Deliberately small: same-shape (or scalar) elementwise arithmetic,
reductions to a scalar, 2-D matrix product, valid-mode strided
convolution, 2x average pooling and reflect padding. That is enough to
express feature losses, cosine-embedding losses, windowed structural
similarity and the optimization of a latent code against them.

Every ``Tensor`` doubles as a node of the computation graph: it carries
the op tag that produced it, references to its parent tensors, the
cached forward value (``data``) and the backward rule. Results whose
inputs do not require gradients are constant-folded (no parents kept),
so reference branches of a loss stay cheap.

Gradients accumulate: each :func:`backward` call adds one full gradient
into ``grad`` of every participating tensor with ``requires_grad=True``.
Call :meth:`Tensor.zero_grad` (or build fresh leaves) between steps.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Scalar = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Scalar, Sequence]

_ELEMENTWISE_BINARY = ("add", "sub", "mul", "div", "pow")
_ELEMENTWISE_UNARY = ("abs", "sqrt")
_REDUCTIONS = ("sum", "mean", "max")


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Backward pass requested on an unsuitable graph."""


class Tensor:
    """A float64 array plus the graph bookkeeping needed for backward.

    ``data`` is row-major and never mutated by graph operations; updates
    (e.g. an optimizer step) should build a fresh leaf. ``grad`` stays
    ``None`` until a backward pass deposits into it, and is only ever
    populated on tensors with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @classmethod
    def _node(
        cls,
        data: np.ndarray,
        op: str,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        else:
            # constant fold: nothing upstream wants gradients
            out._parents = ()
            out._backward = None
            out._op = "const"
        return out

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this value, cut off from the graph."""
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __pow__(self, other: ArrayLike) -> "Tensor":
        return pow_(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def abs(self) -> "Tensor":
        return abs_(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sum(self) -> "Tensor":
        return reduce("sum", self)

    def mean(self) -> "Tensor":
        return reduce("mean", self)

    def max(self) -> "Tensor":
        return reduce("max", self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(
        f"{op}: shapes {a.data.shape} and {b.data.shape} differ and neither operand is a scalar"
    )


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient onto a (possibly scalar) operand shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("add", a, b)

    def bwd(g: np.ndarray):
        return _fit(g, a.data.shape), _fit(g, b.data.shape)

    return Tensor._node(a.data + b.data, "add", (a, b), bwd)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("sub", a, b)

    def bwd(g: np.ndarray):
        return _fit(g, a.data.shape), _fit(-g, b.data.shape)

    return Tensor._node(a.data - b.data, "sub", (a, b), bwd)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("mul", a, b)

    def bwd(g: np.ndarray):
        return _fit(g * b.data, a.data.shape), _fit(g * a.data, b.data.shape)

    return Tensor._node(a.data * b.data, "mul", (a, b), bwd)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by zero")

    def bwd(g: np.ndarray):
        ga = _fit(g / b.data, a.data.shape)
        gb = _fit(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return Tensor._node(a.data / b.data, "div", (a, b), bwd)


def pow_(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("pow", a, b)
    if b.requires_grad and np.any(a.data <= 0.0):
        raise ValueError("pow: differentiating w.r.t. the exponent needs a strictly positive base")
    data = a.data**b.data

    def bwd(g: np.ndarray):
        ga = _fit(g * b.data * a.data ** (b.data - 1.0), a.data.shape)
        gb = _fit(g * data * np.log(a.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(data, "pow", (a, b), bwd)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def bwd(g: np.ndarray):
        return (-g,)

    return Tensor._node(-a.data, "neg", (a,), bwd)


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def bwd(g: np.ndarray):
        # sign(0) == 0: the subgradient at the kink
        return (g * np.sign(a.data),)

    return Tensor._node(np.abs(a.data), "abs", (a,), bwd)


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g: np.ndarray):
        return (g / (2.0 * data),)

    return Tensor._node(data, "sqrt", (a,), bwd)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g: np.ndarray):
        return (g * data,)

    return Tensor._node(data, "exp", (a,), bwd)


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g: np.ndarray):
        return (g * (1.0 - data * data),)

    return Tensor._node(data, "tanh", (a,), bwd)


def clamped_pow(x: ArrayLike, exponent: float, floor: float = 0.0) -> Tensor:
    """max(x, floor) ** exponent as one fused op.

    The gradient is zero wherever the clamp is active, which keeps
    fractional exponents of (possibly negative) similarity factors from
    producing inf * 0 in the chain rule.
    """
    x = as_tensor(x)
    base = np.maximum(x.data, floor)
    with np.errstate(divide="ignore", over="ignore"):
        data = base**exponent

        def bwd(g: np.ndarray):
            slope = np.where(x.data > floor, exponent * base ** (exponent - 1.0), 0.0)
            return (g * slope,)

    return Tensor._node(data, "clamped_pow", (x,), bwd)


def elementwise(op: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Name-dispatched elementwise op: add/sub/mul/div/pow need two operands,
    abs/sqrt exactly one."""
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise {op!r} needs two operands")
        return {"add": add, "sub": sub, "mul": mul, "div": div, "pow": pow_}[op](a, b)
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise {op!r} takes a single operand")
        return {"abs": abs_, "sqrt": sqrt}[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions


def reduce(op: str, a: ArrayLike) -> Tensor:
    """Reduce a tensor to a scalar node. mean distributes 1/N on backward;
    max routes the gradient to the first argmax."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError(f"reduce {op!r} on empty tensor")
    if op == "sum":
        def bwd(g: np.ndarray):
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return Tensor._node(np.asarray(a.data.sum()), "sum", (a,), bwd)
    if op == "mean":
        n = a.data.size

        def bwd(g: np.ndarray):
            return (np.broadcast_to(g / n, a.data.shape).copy(),)

        return Tensor._node(np.asarray(a.data.mean()), "mean", (a,), bwd)
    if op == "max":
        idx = np.unravel_index(np.argmax(a.data), a.data.shape)

        def bwd(g: np.ndarray):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            return (buf,)

        return Tensor._node(np.asarray(a.data.max()), "max", (a,), bwd)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# shape and linear algebra


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g: np.ndarray):
        return (g.reshape(old_shape),)

    return Tensor._node(data, "reshape", (a,), bwd)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.data.shape} and {b.data.shape}")

    def bwd(g: np.ndarray):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data @ b.data, "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (valid padding only)


def conv_bank(x: ArrayLike, kernels: ArrayLike, stride: int = 1) -> Tensor:
    """Valid cross-correlation of a (ci,h,w) input with a (co,ci,kh,kw)
    filter bank; output is (co,oh,ow) with oh = floor((h-kh)/stride)+1."""
    x, k = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError(f"conv_bank needs (ci,h,w) and (co,ci,kh,kw), got {x.data.shape} and {k.data.shape}")
    ci, h, w = x.data.shape
    co, kci, kh, kw = k.data.shape
    if kci != ci:
        raise ShapeError(f"conv_bank: input has {ci} channels but kernels expect {kci}")
    if kh > h or kw > w:
        raise ShapeError(f"conv_bank: kernel {k.data.shape} larger than input {x.data.shape}")
    if stride < 1 or int(stride) != stride:
        raise ValueError(f"conv_bank: stride must be a positive integer, got {stride}")
    stride = int(stride)

    windows = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # windows: (ci, oh, ow, kh, kw)
    out = np.tensordot(windows, k.data, axes=([0, 3, 4], [1, 2, 3]))  # (oh, ow, co)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 0))
    oh, ow = out.shape[1], out.shape[2]
    need_dx, need_dk = x.requires_grad, k.requires_grad
    kdata = k.data

    def bwd(g: np.ndarray):
        dk = np.tensordot(g, windows, axes=([1, 2], [1, 2])) if need_dk else None
        dx = None
        if need_dx:
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    patch = np.tensordot(kdata[:, :, i, j], g, axes=(0, 0))  # (ci, oh, ow)
                    dx[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += patch
        return dx, dk

    return Tensor._node(out, "conv_bank", (x, k), bwd)


def conv2d(x: ArrayLike, kernel: ArrayLike, stride: int = 1) -> Tensor:
    """Single-filter valid convolution: (c,h,w) with a (c,kh,kw) kernel
    summed over channels; output shape (1,oh,ow)."""
    k = as_tensor(kernel)
    if k.data.ndim != 3:
        raise ShapeError(f"conv2d kernel must be (c,kh,kw), got {k.data.shape}")
    return conv_bank(x, reshape(k, (1,) + k.data.shape), stride)


def downsample2x(x: ArrayLike) -> Tensor:
    """2x2 average pooling with stride 2; an odd trailing row/column is
    dropped. Accepts (h,w) or (c,h,w)."""
    x = as_tensor(x)
    if x.data.ndim == 2:
        return reshape(downsample2x(reshape(x, (1,) + x.data.shape)), (x.data.shape[0] // 2, x.data.shape[1] // 2))
    if x.data.ndim != 3:
        raise ShapeError(f"downsample2x needs (h,w) or (c,h,w), got {x.data.shape}")
    c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"downsample2x: spatial size {h}x{w} is smaller than 2x2")
    h2, w2 = h // 2, w // 2
    data = x.data[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))

    def bwd(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (dx,)

    return Tensor._node(data, "downsample2x", (x,), bwd)


def pad_reflect2d(x: ArrayLike, pad: int) -> Tensor:
    """Reflect-pad the two trailing spatial axes by `pad` on each side."""
    x = as_tensor(x)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"pad_reflect2d needs (h,w) or (c,h,w), got {x.data.shape}")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return reshape(x, x.data.shape)
    h, w = x.data.shape[-2], x.data.shape[-1]
    if h <= pad or w <= pad:
        raise ShapeError(f"pad_reflect2d: pad {pad} too large for spatial size {h}x{w}")
    iy = np.pad(np.arange(h), pad, mode="reflect")
    ix = np.pad(np.arange(w), pad, mode="reflect")
    data = x.data[..., iy, :][..., :, ix]

    def _fold(indices: np.ndarray, size: int, g: np.ndarray, axis: int) -> np.ndarray:
        moved = np.moveaxis(g, axis, 0)
        out = np.zeros((size,) + moved.shape[1:], dtype=np.float64)
        np.add.at(out, indices, moved)
        return np.moveaxis(out, 0, axis)

    def bwd(g: np.ndarray):
        dx = _fold(ix, w, g, -1)
        dx = _fold(iy, h, dx, -2)
        return (dx,)

    return Tensor._node(data, "pad_reflect2d", (x,), bwd)


# ---------------------------------------------------------------------------
# backward engine


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack = [root]
    while stack:
        node = stack[-1]
        st = state.get(id(node), 0)
        if st == 0:
            state[id(node)] = 1
            for p in node._parents:
                if state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if st == 1:
                state[id(node)] = 2
                order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate grad buffers of every requires_grad tensor reachable from
    a scalar loss. Visits each node exactly once, in reverse topological
    order; repeated calls accumulate one full gradient each."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = _toposort(loss)
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            flow[key] = flow[key] + pg if key in flow else pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> float:
    """Max relative gap between the autodiff gradient of a scalar function
    and central finite differences: max_i |analytic_i - cd_i| / max(1, |cd_i|).
    Raises if f evaluates non-finite at any perturbed point."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GraphError("grad_check expects f to return a scalar tensor")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    analytic = analytic.reshape(-1)

    base = np.array(x.data, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f_plus = f(Tensor(base.reshape(x.data.shape))).item()
        flat[i] = keep - eps
        f_minus = f(Tensor(base.reshape(x.data.shape))).item()
        flat[i] = keep
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"grad_check: f is non-finite near coordinate {i}")
        cd = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - cd) / max(1.0, abs(cd))
        worst = max(worst, err)
    return worst
