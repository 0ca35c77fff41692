"""Dense tensors with reverse-mode automatic differentiation.

Every backward rule is written in terms of differentiable tensor operations,
so gradients can themselves be differentiated (``create_graph=True``).  That
is what the Lipschitz gradient penalty on the critic needs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Sequence

import numpy as np

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    """Context manager that stops new operations from being recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """An n-dimensional array that can take part in gradient computation.

    ``data`` is a contiguous numpy array.  ``grad`` is a numpy array of the
    same shape, filled in by :func:`backward` on leaves that require grad.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd entry point ------------------------------------------------
    def backward(self, grad=None, create_graph: bool = False) -> None:
        backward(self, grad, create_graph=create_graph)

    # -- operator sugar; implementations live in icaps.ops --------------------
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __pow__(self, exponent: float):
        return ops.power(self, exponent)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def exp(self):
        return ops.exp(self)

    def log(self):
        return ops.log(self)

    def relu(self):
        return ops.relu(self)


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A recorded operation.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` on
    tensors, returning one gradient (or ``None``) per input.
    """

    inputs: tuple[Tensor, ...]
    _needs: tuple[bool, ...] | None = None

    def needs(self, i: int) -> bool:
        """Whether the gradient for input ``i`` is wanted by the current pass."""
        if self._needs is not None:
            return self._needs[i]
        return self.inputs[i].requires_grad

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls()
        fn.inputs = inputs
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out


def tape(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
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
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _propagate(
    root: Tensor, seed: Tensor, create_graph: bool, targets: set[int] | None = None
) -> dict[int, Tensor]:
    order = tape(root)
    # prune branches that cannot reach a requested tensor
    useful: set[int] = set()
    for node in order:
        if (targets is None and node._ctx is None) or (targets is not None and id(node) in targets):
            useful.add(id(node))
        elif node._ctx is not None and any(id(p) in useful for p in node._ctx.inputs):
            useful.add(id(node))
    grads: dict[int, Tensor] = {id(root): seed}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._ctx is None:
                continue
            fn = node._ctx
            fn._needs = tuple(p.requires_grad and id(p) in useful for p in fn.inputs)
            try:
                parent_grads = fn.backward(g)
            finally:
                fn._needs = None
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(fn.inputs, parent_grads):
                if pg is None or not parent.requires_grad or id(parent) not in useful:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(fn).__name__} produced grad of shape {pg.shape} "
                        f"for input of shape {parent.shape}"
                    )
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return grads


def _seed(output: Tensor, grad) -> Tensor:
    if grad is None:
        if output.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {output.shape}")
        return Tensor(np.ones_like(output.data))
    grad = as_tensor(grad)
    if grad.shape != output.shape:
        raise ValueError(f"seed gradient shape {grad.shape} != output shape {output.shape}")
    return grad


def backward(loss: Tensor, grad=None, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    seed = _seed(loss, grad)
    if not loss.requires_grad:
        return
    grads = _propagate(loss, seed, create_graph)
    for node in tape(loss):
        if node._ctx is None and node.requires_grad and id(node) in grads:
            g = grads[id(node)].data
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Return d(output)/d(input) for each input without touching ``.grad``.

    Inputs unreachable from ``output`` get a zero gradient.  With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    seed = _seed(output, grad_output)
    targets = {id(t) for t in inputs}
    grads = _propagate(output, seed, create_graph, targets) if output.requires_grad else {}
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return result


from icaps import ops  # noqa: E402  (circular: ops builds on Tensor)
