"""Dense tensors with define-by-run reverse-mode differentiation.

Every op in :mod:`routecloud.ops` produces a new :class:`Tensor`. When grad
recording is enabled and any input requires grad, the output remembers its
parents and a backward closure. :func:`backward` walks that graph once, in
reverse topological order, and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "backward",
    "no_grad",
    "grad_enabled",
    "debug_mode",
]

_state = threading.local()


def _flag(name, default):
    return getattr(_state, name, default)


def grad_enabled():
    return _flag("grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Check every op output for NaN/Inf while active."""
    prev = _flag("debug", False)
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop.

    ``data`` is kept C-contiguous and floating point. ``grad`` is ``None``
    until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; the ops module does the work
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data, parents, backward_fn, op):
    """Wrap an op output, attaching graph edges when recording is on.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    if _flag("debug", False) and not np.all(np.isfinite(out.data)):
        finite_in = all(np.all(np.isfinite(p.data)) for p in parents)
        if finite_in:
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return out


class Tape:
    """The recorded ops reachable from one scalar loss, in topological order.

    A tape runs at most once; its closures are released afterwards.
    """

    def __init__(self, loss):
        if not isinstance(loss, Tensor):
            raise ContractError("backward() expects a Tensor")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._consumed:
            raise ContractError("backward already ran on this graph; rebuild it with a new forward pass")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        self.loss = loss
        self.ops = self._toposort(loss)
        self._ran = False

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
        stack = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def run(self):
        if self._ran:
            raise ContractError("tape already consumed")
        self._ran = True
        grads = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate across fan-out and across tapes
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in self.ops:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
        self.loss._consumed = True


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    Tape(loss).run()
