"""Differentiable operations over :class:`Tensor`.

Every function accepts tensors, numpy arrays or python scalars and returns a
new tensor.  Gradients for broadcast operands are summed back to the operand
shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, record


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "min", "max")


def elementwise(kind: str, a, b) -> Tensor:
    """Broadcasting binary op; ``kind`` is one of add, sub, mul, div, min, max.

    For min/max the whole gradient goes to the operand holding the extremum;
    on an exact tie it goes to ``a``.
    """
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    x, y = a.data, b.data
    if kind == "add":
        out = x + y
    elif kind == "sub":
        out = x - y
    elif kind == "mul":
        out = x * y
    elif kind == "div":
        if np.any(y == 0):
            raise ZeroDivisionError("division by a tensor containing zero")
        out = x / y
    elif kind == "min":
        pick_a = x <= y
        out = np.where(pick_a, x, y)
    elif kind == "max":
        pick_a = x >= y
        out = np.where(pick_a, x, y)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    result = Tensor(out, dtype=out.dtype)

    def backward(grads):
        (g,) = grads
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * y, g * x
        elif kind == "div":
            ga = g / y
            gb = -g * x / (y * y)
        else:
            ga = np.where(pick_a, g, 0)
            gb = np.where(pick_a, 0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    record(kind, (a, b), (result,), backward)
    return result


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def minimum(a, b) -> Tensor:
    return elementwise("min", a, b)


def maximum(a, b) -> Tensor:
    return elementwise("max", a, b)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------


def _unary(name: str, x: Tensor, out: np.ndarray, grad_fn) -> Tensor:
    result = Tensor(out, dtype=x.dtype)
    record(name, (x,), (result,), lambda grads: (grad_fn(grads[0]),))
    return result


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _unary("neg", x, -x.data, lambda g: -g)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary("exp", x, out, lambda g: g * out)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    return _unary("log", x, np.log(x.data), lambda g: g / x.data)


def sqrt(x) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def grad(g):
        safe = np.where(out > 0, out, 1)
        return np.where(out > 0, g / (2 * safe), 0).astype(x.dtype, copy=False)

    return _unary("sqrt", x, out, grad)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _unary("relu", x, x.data * mask, lambda g: g * mask)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _unary("sigmoid", x, out, lambda g: g * out * (1 - out))


def cast(x, dtype) -> Tensor:
    x = as_tensor(x)
    src = x.dtype
    return _unary("cast", x, x.data.astype(dtype), lambda g: g.astype(src))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _unary("reshape", x, x.data.reshape(shape), lambda g: g.reshape(src))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _unary("transpose", x, np.ascontiguousarray(x.data.transpose(axes)), lambda g: g.transpose(inv))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data
    out = np.array(x.data[index], dtype=x.dtype)
    basic = _is_basic_index(index)

    def grad(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return _unary("getitem", x, out, grad)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError(f"concat shape mismatch: {ref.shape} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    result = Tensor(out, dtype=out.dtype)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(grads):
        (g,) = grads
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return pieces

    record("concat", tensors, (result,), backward)
    return result


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _first_extremum_mask(data: np.ndarray, axes: tuple, kind: str) -> np.ndarray:
    """Boolean mask marking, per reduced group, the first element (row-major
    over the reduced axes) that attains the max/min."""
    keep = [i for i in range(data.ndim) if i not in axes]
    moved = np.moveaxis(data, axes, tuple(range(data.ndim - len(axes), data.ndim)))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = flat.argmax(axis=-1) if kind == "max" else flat.argmin(axis=-1)
    mask = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(mask, idx[..., None], True, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.moveaxis(mask, tuple(range(data.ndim - len(axes), data.ndim)), axes)


def reduce(kind: str, x, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with ``kind`` in {sum, mean, max, min}.

    max/min send the gradient to the first element attaining the extremum.
    """
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    d = x.data
    if kind == "sum":
        out = d.sum(axis=axes, keepdims=True)
    elif kind == "mean":
        out = d.mean(axis=axes, keepdims=True)
    elif kind == "max":
        out = d.max(axis=axes, keepdims=True)
    elif kind == "min":
        out = d.min(axis=axes, keepdims=True)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(d.shape) if i not in axes))

    def grad(g):
        g = g.reshape(kept_shape)
        if kind == "sum":
            return np.broadcast_to(g, d.shape).copy()
        if kind == "mean":
            count = int(np.prod([d.shape[a] for a in axes])) if axes else 1
            return np.broadcast_to(g / count, d.shape).copy()
        mask = _first_extremum_mask(d, axes, kind)
        return np.where(mask, g, 0).astype(d.dtype, copy=False)

    return _unary(kind, x, np.asarray(out, dtype=d.dtype), grad)


def sum(x, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x, axes=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    result = Tensor(out, dtype=out.dtype)

    def backward(grads):
        (g,) = grads
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    record("matmul", (a, b), (result,), backward)
    return result


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Column matrix [(c, di, dj), (b, i, j)] of a padded [B, C, H, W] input.

    This layout keeps every copy a run of contiguous image rows.
    """
    B, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def conv2d(x, weight, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation over [B, C_in, H, W] with zero padding.

    ``weight`` is [C_out, C_in, kH, kW]; optional ``bias`` is [C_out].
    """
    x = as_tensor(x)
    weight = as_tensor(weight, like=x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    w2 = weight.data.reshape(Co, -1)
    out = w2 @ cols
    if bias is not None:
        bias = as_tensor(bias, like=x)
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3))
    result = Tensor(out, dtype=out.dtype)

    def backward(grads):
        (g,) = grads
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Co, -1)
        gw = (gt @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ gt).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + H, padding : padding + W].transpose(1, 0, 2, 3))
        out_grads = [gx, gw]
        if bias is not None:
            out_grads.append(gt.sum(axis=1))
        return out_grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record("conv2d", inputs, (result,), backward)
    return result


# ---------------------------------------------------------------------------
# normalisation and attention primitives
# ---------------------------------------------------------------------------


def pairwise_softmax(a, b) -> tuple[Tensor, Tensor]:
    """Two-way softmax evaluated independently at every element.

    Returns (e^a, e^b) / (e^a + e^b), stabilised by subtracting max(a, b).
    """
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"pairwise_softmax needs equal shapes, got {a.shape} and {b.shape}")
    m = np.maximum(a.data, b.data)
    ea = np.exp(a.data - m)
    eb = np.exp(b.data - m)
    z = ea + eb
    pa = ea / z
    pb = eb / z
    out_a = Tensor(pa, dtype=pa.dtype)
    out_b = Tensor(pb, dtype=pb.dtype)

    def backward(grads):
        ga, gb = grads
        d = pa * pb * (ga - gb)
        return d, -d

    record("pairwise_softmax", (a, b), (out_a, out_b), backward)
    return out_a, out_b


def minmax_normalize_spatial(x, epsilon: float = 1e-6) -> Tensor:
    """Rescale every [H, W] slice of a [B, C, H, W] tensor to [0, 1].

    Slices whose range is <= ``epsilon`` become the constant 0.5 and pass no
    gradient.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W], got {x.shape}")
    d = x.data
    mn = d.min(axis=(2, 3), keepdims=True)
    mx = d.max(axis=(2, 3), keepdims=True)
    rng = mx - mn
    degenerate = rng <= epsilon
    safe = np.where(degenerate, 1, rng)
    y = np.where(degenerate, 0.5, (d - mn) / safe).astype(d.dtype, copy=False)
    min_mask = _first_extremum_mask(d, (2, 3), "min")
    max_mask = _first_extremum_mask(d, (2, 3), "max")

    def grad(g):
        direct = g / safe
        g_min = (g * (y - 1)).sum(axis=(2, 3), keepdims=True) / safe
        g_max = -(g * y).sum(axis=(2, 3), keepdims=True) / safe
        out = direct + np.where(min_mask, g_min, 0) + np.where(max_mask, g_max, 0)
        return np.where(degenerate, 0, out).astype(d.dtype, copy=False)

    return _unary("minmax_normalize_spatial", x, y, grad)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return _unary("log_softmax", x, out, grad)


def batch_norm(
    x,
    gamma,
    beta,
    axes: tuple,
    eps: float = 1e-5,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
    """Batch normalisation over ``axes``; ``gamma``/``beta`` broadcast against
    the reduced shape.

    Returns ``(y, batch_mean, batch_var)``; the statistics are ``None`` in
    evaluation mode, where the running statistics are used as constants.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma, like=x)
    beta = as_tensor(beta, like=x)
    d = x.data
    axes = tuple(a % d.ndim for a in axes)
    if training:
        count = int(np.prod([d.shape[a] for a in axes]))
        if count < 2:
            raise ValueError("batch norm in training mode needs more than one value per channel")
        mu = d.mean(axis=axes, keepdims=True)
        centred = d - mu
        var = (centred * centred).mean(axis=axes, keepdims=True)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("evaluation mode needs running statistics")
        keep = [d.shape[i] if i not in axes else 1 for i in range(d.ndim)]
        mu = running_mean.reshape(keep).astype(d.dtype, copy=False)
        var = running_var.reshape(keep).astype(d.dtype, copy=False)
        centred = d - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    g_shape = gamma.data.reshape([d.shape[i] if i not in axes else 1 for i in range(d.ndim)])
    b_shape = beta.data.reshape(g_shape.shape)
    y = (xhat * g_shape + b_shape).astype(d.dtype, copy=False)
    result = Tensor(y, dtype=y.dtype)

    def backward(grads):
        (g,) = grads
        gg = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        gb = g.sum(axis=axes).reshape(beta.shape)
        dxhat = g * g_shape
        if training:
            m = count
            gx = (inv / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv
        return gx.astype(d.dtype, copy=False), gg, gb

    record("batch_norm", (x, gamma, beta), (result,), backward)
    if training:
        return result, mu.reshape(-1), var.reshape(-1)
    return result, None, None
