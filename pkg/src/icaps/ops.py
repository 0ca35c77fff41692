"""Differentiable operations on :class:`~icaps.tensor.Tensor`.

Backward rules are composed from these same operations, which keeps every
gradient differentiable once more.
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from icaps.tensor import Function, Tensor, as_tensor


class ShapeError(ValueError):
    pass


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for tensor of rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


# --- broadcasting ------------------------------------------------------------


class SumTo(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        lead = x.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
        )
        out = x.sum(axis=axes, keepdims=True) if axes else x
        return out.reshape(shape)

    def backward(self, g):
        return broadcast_to(g, self.in_shape)


class BroadcastTo(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return np.broadcast_to(x, shape)

    def backward(self, g):
        return sum_to(g, self.in_shape)


def sum_to(x, shape) -> Tensor:
    return SumTo.apply(x, shape=tuple(shape))


def broadcast_to(x, shape) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


# --- elementwise --------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(g * b, a.shape) if self.needs(0) else None
        gb = _unbroadcast(g * a, b.shape) if self.needs(1) else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(g / b, a.shape) if self.needs(0) else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if self.needs(1) else None
        return ga, gb


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, g):
        return -g


class Power(Function):
    def forward(self, x, exponent):
        self.exponent = exponent
        return x**exponent

    def backward(self, g):
        (x,) = self.inputs
        p = self.exponent
        if p == 2:
            return g * x * 2.0
        return g * power(x, p - 1) * p


class Exp(Function):
    def forward(self, x):
        return np.exp(x)

    def backward(self, g):
        return g * exp(self.inputs[0])


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, g):
        return g / self.inputs[0]


class Tanh(Function):
    def forward(self, x):
        return np.tanh(x)

    def backward(self, g):
        t = tanh(self.inputs[0])
        return g * (1.0 - t * t)


class Sigmoid(Function):
    def forward(self, x):
        return 0.5 * (np.tanh(0.5 * x) + 1.0)

    def backward(self, g):
        s = sigmoid(self.inputs[0])
        return g * s * (1.0 - s)


class _Masked(Function):
    """y = x * m(x) with a piecewise-constant slope m; second derivative is zero."""

    def slope(self, x) -> np.ndarray:
        raise NotImplementedError

    def forward(self, x, **kw):
        self.kw = kw
        self.m = self.slope(x, **kw)
        return self.value(x, **kw)

    def backward(self, g):
        return g * Tensor(self.m)


class Relu(_Masked):
    def slope(self, x):
        return (x > 0).astype(x.dtype)

    def value(self, x):
        return np.maximum(x, 0)


class LeakyRelu(_Masked):
    def slope(self, x, alpha):
        return np.where(x > 0, 1.0, alpha).astype(x.dtype)

    def value(self, x, alpha):
        return np.where(x > 0, x, alpha * x)


class Clip(_Masked):
    def slope(self, x, lo, hi):
        return ((x >= lo) & (x <= hi)).astype(x.dtype)

    def value(self, x, lo, hi):
        return np.clip(x, lo, hi)


class Abs(_Masked):
    def slope(self, x):
        return np.sign(x).astype(x.dtype)

    def value(self, x):
        return np.abs(x)


class Where(Function):
    def forward(self, a, b, cond):
        self.cond = cond
        return np.where(cond, a, b)

    def backward(self, g):
        a, b = self.inputs
        mask = Tensor(self.cond)
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * (1.0 - mask), b.shape)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(x):
    return Neg.apply(x)


def power(x, exponent: float):
    return Power.apply(x, exponent=exponent)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def tanh(x):
    return Tanh.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def relu(x):
    return Relu.apply(x)


def leaky_relu(x, alpha: float = 0.2):
    return LeakyRelu.apply(x, alpha=alpha)


def clip(x, lo: float, hi: float):
    return Clip.apply(x, lo=lo, hi=hi)


def abs(x):  # noqa: A001
    return Abs.apply(x)


def where(cond, a, b):
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    return Where.apply(a, b, cond=cond)


def square(x):
    return power(x, 2)


def sqrt(x):
    return power(x, 0.5)


# --- reductions ---------------------------------------------------------------


class Sum(Function):
    def forward(self, x, axis, keepdims):
        self.in_shape = x.shape
        self.axis = _norm_axis(axis, x.ndim)
        self.keepdims = keepdims
        return np.sum(x, axis=self.axis, keepdims=keepdims)

    def backward(self, g):
        if not self.keepdims:
            axes = self.axis if self.axis is not None else tuple(range(len(self.in_shape)))
            shape = tuple(1 if i in axes else n for i, n in enumerate(self.in_shape))
            g = reshape(g, shape)
        return broadcast_to(g, self.in_shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis, keepdims) * (1.0 / count)


class Norm(Function):
    """Euclidean norm along ``axis``; the subgradient at the origin is 0."""

    def forward(self, x, axis, keepdims):
        self.axis = _norm_axis(axis, x.ndim)
        self.keepdims = keepdims
        n = np.sqrt(np.sum(x * x, axis=self.axis, keepdims=True))
        self.zero = n == 0
        return n if keepdims else np.squeeze(n, axis=self.axis) if self.axis else n.reshape(())

    def backward(self, g):
        (x,) = self.inputs
        n = norm(x, self.axis, keepdims=True)
        safe = where(self.zero, Tensor(np.ones_like(n.data)), n)
        if not self.keepdims:
            g = reshape(g, n.shape)
        return x * (g / safe)


def norm(x, axis=None, keepdims=False):
    return Norm.apply(x, axis=axis, keepdims=keepdims)


def softmax(x, axis=-1):
    x = as_tensor(x)
    _norm_axis(axis, x.ndim)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / sum(e, axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    _norm_axis(axis, x.ndim)
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - log(sum(exp(shifted), axis, keepdims=True))


# --- shape ----------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return reshape(g, self.in_shape)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = axes if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, g):
        return transpose(g, tuple(np.argsort(self.axes)))


class GetItem(Function):
    def forward(self, x, index):
        self.in_shape = x.shape
        self.index = index
        return x[index]

    def backward(self, g):
        return ScatterAdd.apply(g, index=self.index, shape=self.in_shape)


class ScatterAdd(Function):
    def forward(self, g, index, shape):
        self.index = index
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return out

    def backward(self, h):
        return getitem(h, self.index)


class Concat(Function):
    def forward(self, *xs, axis):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        grads = []
        start = 0
        for size in self.sizes:
            idx = [builtins.slice(None)] * g.ndim
            idx[self.axis] = builtins.slice(start, start + size)
            grads.append(getitem(g, tuple(idx)))
            start += size
        return tuple(grads)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=None if axes is None else tuple(axes))


def getitem(x, index):
    return GetItem.apply(x, index=index)


def slice(x, start: int, stop: int, axis: int = 0):  # noqa: A001
    x = as_tensor(x)
    (axis,) = _norm_axis(axis, x.ndim)
    idx = [builtins.slice(None)] * x.ndim
    idx[axis] = builtins.slice(start, stop)
    return getitem(x, tuple(idx))


def concat(xs, axis: int = 0):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat needs at least one tensor")
    (axis,) = _norm_axis(axis, xs[0].ndim)
    return Concat.apply(*xs, axis=axis)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# --- linear algebra -------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(matmul(g, swap_last(b)), a.shape) if self.needs(0) else None
        gb = _unbroadcast(matmul(swap_last(a), g), b.shape) if self.needs(1) else None
        return ga, gb


def matmul(a, b):
    return MatMul.apply(a, b)


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# --- convolution ----------------------------------------------------------------
#
# conv2d, conv_transpose2d and conv2d_kernel_grad are the three partial
# derivatives of one trilinear form <conv2d(x, w), g>, so each one's backward
# is written with the other two.


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv output size ({n} + 2*{padding} - {k})/{stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def _windows(x, kh, kw, stride, padding, oh, ow):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _conv2d(x, w, stride, padding):
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    win = _windows(x, kh, kw, stride, padding, oh, ow)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def _conv_transpose2d(g, w, stride, padding, out_hw):
    n, co, oh, ow = g.shape
    co2, ci, kh, kw = w.shape
    if co != co2:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {g.shape}, kernel {w.shape}")
    h, wd = out_hw
    if _out_size(h, kh, stride, padding) != oh or _out_size(wd, kw, stride, padding) != ow:
        raise ShapeError(f"output size {out_hw} inconsistent with input {g.shape} and kernel {w.shape}")
    cols = np.tensordot(g, w, axes=([1], [0]))  # n, oh, ow, ci, kh, kw
    out = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    ys, xs = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ys : stride, j : j + xs : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return out[:, :, padding : padding + h, padding : padding + wd]


def _kernel_grad(x, g, stride, padding, kshape):
    kh, kw = kshape
    oh, ow = g.shape[2:]
    win = _windows(x, kh, kw, stride, padding, oh, ow)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


class Conv2d(Function):
    def forward(self, x, w, stride, padding):
        self.stride, self.padding = stride, padding
        return _conv2d(x, w, stride, padding)

    def backward(self, g):
        x, w = self.inputs
        s, p = self.stride, self.padding
        gx = conv_transpose2d(g, w, s, p, output_size=x.shape[2:]) if self.needs(0) else None
        gw = conv2d_kernel_grad(x, g, s, p, w.shape[2:]) if self.needs(1) else None
        return gx, gw


class ConvTranspose2d(Function):
    def forward(self, x, w, stride, padding, output_size):
        self.stride, self.padding = stride, padding
        return _conv_transpose2d(x, w, stride, padding, output_size)

    def backward(self, h):
        x, w = self.inputs
        s, p = self.stride, self.padding
        gx = conv2d(h, w, s, p) if self.needs(0) else None
        gw = conv2d_kernel_grad(h, x, s, p, w.shape[2:]) if self.needs(1) else None
        return gx, gw


class Conv2dKernelGrad(Function):
    def forward(self, x, g, stride, padding, kshape):
        self.stride, self.padding = stride, padding
        return _kernel_grad(x, g, stride, padding, kshape)

    def backward(self, hk):
        x, g = self.inputs
        s, p = self.stride, self.padding
        gx = conv_transpose2d(g, hk, s, p, output_size=x.shape[2:]) if self.needs(0) else None
        gg = conv2d(x, hk, s, p) if self.needs(1) else None
        return gx, gg


def conv2d(x, kernel, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x[n, ci, h, w]`` with ``kernel[co, ci, kh, kw]``."""
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


def conv_transpose2d(x, kernel, stride: int = 1, padding: int = 0, output_size=None):
    """Adjoint of :func:`conv2d`; ``kernel`` is ``[c_in, c_out, kh, kw]``.

    Without ``output_size`` the smallest consistent size
    ``(h - 1) * stride - 2 * padding + kh`` is used.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d needs rank-4 tensors, got {x.shape} and {kernel.shape}")
    if output_size is None:
        kh, kw = kernel.shape[2:]
        output_size = (
            (x.shape[2] - 1) * stride - 2 * padding + kh,
            (x.shape[3] - 1) * stride - 2 * padding + kw,
        )
    return ConvTranspose2d.apply(
        x, kernel, stride=stride, padding=padding, output_size=tuple(output_size)
    )


def conv2d_kernel_grad(x, g, stride, padding, kernel_hw):
    return Conv2dKernelGrad.apply(x, g, stride=stride, padding=padding, kshape=tuple(kernel_hw))
