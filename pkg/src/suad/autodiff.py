"""Dense float tensors with reverse-mode automatic differentiation.

Implements exactly the operator set the 3-D autoencoders need: 3-D
cross-correlation, trilinear upsampling, dense layers, pointwise
nonlinearities and full reductions. Forward calls record operations on
the output tensors; :func:`backward` derives the tape (the reverse
topological order of those operations) and accumulates a gradient on
every tensor that requested one.

Tensors are 32-bit floats by default. The :func:`use_dtype` context
switches newly created tensors to 64-bit so a gradient check can rerun
the same graph at tighter tolerances. Tensors recorded on a tape are
never mutated in place; optimizers assign fresh arrays between steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from ._interp import axis_indices, axis_matrix, lerp_axis
from .errors import ContractViolation, DimensionError, NumericError, ParameterError

_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    """Dtype given to tensors created without an explicit one."""
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the default tensor dtype (e.g. to float64)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Temporarily disable operation recording (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An immutable dense float array plus autodiff bookkeeping.

    ``data`` is a contiguous numpy array; ``grad`` is populated by
    :func:`backward` for tensors created with ``requires_grad=True``.
    All values must be finite; producing NaN or Inf raises
    :class:`~suad.errors.NumericError` instead of propagating silently.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if not np.isfinite(arr).all():
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    """One recorded operation: inputs plus a rule mapping the output
    gradient to input gradients (a ``None`` entry skips that input)."""

    __slots__ = ("name", "inputs", "backward_fn", "out", "consumed")

    def __init__(self, name: str, inputs: tuple[Tensor, ...], backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out: Tensor | None = None
        self.consumed = False


class Tape:
    """The operations reaching a tensor, in topological order.

    Derived on demand from the recorded graph; every operation's inputs
    precede it, so a single reverse sweep applies the chain rule.
    """

    def __init__(self, ops: list[_Node]):
        self.ops = ops
        self.consumed = False

    @classmethod
    def trace(cls, t: Tensor) -> "Tape":
        ops: list[_Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(t, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor.node
            if node is None or (not expanded and id(node) in seen):
                continue
            if expanded:
                ops.append(node)
                continue
            seen.add(id(node))
            stack.append((tensor, True))
            for inp in node.inputs:
                stack.append((inp, False))
        return cls(ops)


def _result(data: np.ndarray, name: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out.node = None
    if out.requires_grad:
        node = _Node(name, inputs, backward_fn)
        node.out = out
        out.node = node
    return out


def _require_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data * s, "scale", (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data + s, "add_scalar", (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the gradient is zero wherever x <= 0."""
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _result(y, "sigmoid", (a,), lambda g: (g * (y * (1 - y)),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x| with the sign subgradient (zero at x == 0)."""
    return _result(np.abs(a.data), "absolute", (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, "square", (a,), lambda g: (g * (2 * a.data),))


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a scalar (shape ``()``)."""

    def _back(g):
        return (np.full(a.shape, float(g), dtype=a.dtype),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), "sum_all", (a,), _back)


def reshape(a: Tensor, new_shape: Sequence[int]) -> Tensor:
    """Reshape preserving row-major order; gradient reshapes back.

    A single ``-1`` entry is inferred from the element count.
    """
    new_shape = tuple(int(s) for s in new_shape)
    if new_shape.count(-1) > 1:
        raise DimensionError(f"reshape: at most one -1 allowed, got {new_shape}")
    if -1 in new_shape:
        known = int(np.prod([s for s in new_shape if s != -1], dtype=np.int64))
        if known == 0 or a.size % known:
            raise DimensionError(f"reshape: cannot view {a.shape} as {new_shape}")
        new_shape = tuple(a.size // known if s == -1 else s for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {new_shape}")
    old_shape = a.shape
    return _result(a.data.reshape(new_shape), "reshape", (a,), lambda g: (g.reshape(old_shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    if a.ndim < 2:
        raise DimensionError(f"flatten needs a batch dimension, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# linear algebra ops


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer ``x @ weight.T + bias`` for ``x[N, K]``, ``weight[M, K]``."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"linear: expected x[N,K], weight[M,K], bias[M]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise DimensionError(
            f"linear: inner dims disagree for x{x.shape}, weight{weight.shape}, bias{bias.shape}"
        )

    def _back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(x.data @ weight.data.T + bias.data, "linear", (x, weight, bias), _back)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation with stride and symmetric zero padding.

    ``x`` is ``[N, C, D, H, W]`` and ``weight`` is ``[F, C, kd, kh, kw]``;
    the output spatial size along each axis is
    ``floor((dim + 2 * padding - k) / stride) + 1``. No kernel flip is
    applied. The backward rule yields exact gradients for the input,
    the weights and the bias.
    """
    if x.ndim != 5 or weight.ndim != 5 or bias.ndim != 1:
        raise DimensionError(
            f"conv3d: expected x[N,C,D,H,W], weight[F,C,kd,kh,kw], bias[F]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"conv3d: stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ParameterError(f"conv3d: padding must be a non-negative integer, got {padding!r}")
    n, c, d, h, w = x.shape
    f, cw, kd, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv3d: input has {c} channels but weight expects {cw}")
    if bias.shape[0] != f:
        raise DimensionError(f"conv3d: bias has {bias.shape[0]} entries for {f} filters")
    padded = (d + 2 * padding, h + 2 * padding, w + 2 * padding)
    if kd > padded[0] or kh > padded[1] or kw > padded[2]:
        raise DimensionError(
            f"conv3d: kernel {(kd, kh, kw)} exceeds padded input {padded}"
        )
    do = (padded[0] - kd) // stride + 1
    ho = (padded[1] - kh) // stride + 1
    wo = (padded[2] - kw) // stride + 1

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data

    def _window(arr, i, j, l):
        return arr[
            :,
            :,
            i : i + stride * (do - 1) + 1 : stride,
            j : j + stride * (ho - 1) + 1 : stride,
            l : l + stride * (wo - 1) + 1 : stride,
        ]

    acc = np.zeros((n, do, ho, wo, f), dtype=x.dtype)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                acc += np.tensordot(_window(xp, i, j, l), weight.data[:, :, i, j, l], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, -1, 1)) + bias.data.reshape(1, f, 1, 1, 1)

    def _back(g):
        gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        gw[:, :, i, j, l] = np.tensordot(
                            g, _window(xp, i, j, l), axes=([0, 2, 3, 4], [0, 2, 3, 4])
                        )
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for l in range(kw):
                        contrib = np.tensordot(g, weight.data[:, :, i, j, l], axes=([1], [0]))
                        _window(gxp, i, j, l)[...] += np.moveaxis(contrib, -1, 1)
            gx = gxp[:, :, p : p + d, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    return _result(out, "conv3d", (x, weight, bias), _back)


def trilinear_upsample(x: Tensor, scale_factor: int) -> Tensor:
    """Upsample the three trailing axes of ``x[N, C, D, H, W]`` by an
    integer factor using trilinear interpolation.

    Output sample ``i`` reads source coordinate ``(i + 0.5) / scale - 0.5``
    clamped to the valid range (align-corners=false); a constant field is
    reproduced exactly. Differentiable with respect to ``x``.
    """
    if not isinstance(scale_factor, int) or scale_factor < 1:
        raise ParameterError(f"trilinear_upsample: scale must be an integer >= 1, got {scale_factor!r}")
    if x.ndim != 5:
        raise DimensionError(f"trilinear_upsample: expected x[N,C,D,H,W], got {x.shape}")

    in_dims = x.shape[2:]
    plans = [axis_indices(dim, dim * scale_factor) for dim in in_dims]
    out = x.data
    for axis, (i0, i1, t) in enumerate(plans):
        out = lerp_axis(out, axis + 2, i0, i1, t)

    def _back(g):
        gi = g
        for axis in (4, 3, 2):
            mat = axis_matrix(in_dims[axis - 2], in_dims[axis - 2] * scale_factor, dtype=g.dtype)
            gi = np.moveaxis(np.tensordot(gi, mat, axes=([axis], [0])), -1, axis)
        return (np.ascontiguousarray(gi),)

    return _result(out, "trilinear_upsample", (x,), _back)


# ---------------------------------------------------------------------------
# engine


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(t) on every requires_grad tensor in the graph.

    ``loss`` must be scalar; its gradient is seeded with 1. Calling
    backward twice on the same loss would double-count, so the tape is
    marked consumed and a repeat raises. Gradients of non-leaf outputs in
    the traced graph are reset first, which makes separate backward calls
    on losses that share subgraphs independent of each other. Returns the
    map of tensors to their gradients.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    if loss.node is not None:
        if loss.node.consumed:
            raise ContractViolation("backward was already called on this graph")
        loss.node.consumed = True
        for node in tape.ops:
            node.out.grad = None

    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(tape.ops):
        g = node.out.grad
        if g is None:
            continue
        for tensor, gin in zip(node.inputs, node.backward_fn(g)):
            if gin is None or not tensor.requires_grad:
                continue
            if gin.shape != tensor.shape:
                raise DimensionError(
                    f"{node.name}: backward produced gradient of shape {gin.shape} "
                    f"for input of shape {tensor.shape}"
                )
            _accumulate(tensor, gin)

    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        result[loss] = loss.grad
    for node in tape.ops:
        for tensor in node.inputs:
            if tensor.requires_grad and tensor.grad is not None:
                result[tensor] = tensor.grad
    return result


def zero_grad(tensors) -> None:
    """Clear accumulated gradients before building the next graph."""
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must map the supplied tensor to a deterministic scalar. Returns
    ``max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over
    all elements of ``x``. Run the enclosing graph under
    ``use_dtype(np.float64)`` for tight tolerances.
    """
    x0 = np.asarray(x.data, dtype=x.dtype)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=x.dtype)
    out = f(xt)
    backward(out)
    if xt.grad is None:
        raise ContractViolation("grad_check: f does not depend on x")
    analytic = np.asarray(xt.grad, dtype=np.float64)

    numeric = np.zeros(x0.size, dtype=np.float64)
    flat = x0.reshape(-1)
    for idx in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[idx] += h
        xm[idx] -= h
        step = float(xp[idx]) - float(xm[idx])
        with no_grad():
            fp = f(Tensor(xp.reshape(x0.shape), dtype=x.dtype)).item()
            fm = f(Tensor(xm.reshape(x0.shape), dtype=x.dtype)).item()
        numeric[idx] = (fp - fm) / step
    numeric = numeric.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
