"""Minimal reverse-mode autodiff over dense float64 arrays.

Everything is define-by-run: ops executed inside a ``with Tape()`` block
append nodes to that tape, and ``Tape.backward`` (or the free function
``backward``) replays the nodes in reverse creation order, which is a
valid reverse topological order by construction. Tensors are plain
wrappers around contiguous float64 ndarrays; there is no graph caching,
no dtype zoo, and no device concept.

The one non-obvious piece is ``finite_difference_check``: a central
finite-difference oracle used by the test suite to validate every
backward rule independently of the tape machinery.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "add",
    "mul",
    "elementwise_mul",
    "matmul",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "rsqrt",
    "gather_rows",
    "concat",
    "backward",
    "finite_difference_check",
]

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional["_Node"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Operator sugar; floats and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, mul(_lift(other), _lift(-1.0)))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, np.sum, _sum_backward, axis, keepdims, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, np.mean, _mean_backward, axis, keepdims, "mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor(self.data.reshape(shape), requires_grad=self.requires_grad)
        _record("reshape", (self,), out, lambda g: (g.reshape(old),))
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), requires_grad=self.requires_grad)
        _record("transpose", (self,), out, lambda g: (g.transpose(inv),))
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; inputs of every node precede the node."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._finished = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` into every recorded input.

        Rejects non-scalar losses, losses not recorded on this tape, and
        repeat invocations (the tape is consumed by one backward pass).
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.node is None or not any(n is loss.node for n in reversed(self.nodes)):
            raise ValueError("loss was not recorded on this tape")
        if self._finished:
            raise RuntimeError("backward already ran on this tape; build a fresh tape")
        self._finished = True

        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue  # dead branch: nothing downstream consumed this node
            grads = node.backward_fn(out_grad)
            for tensor, g in zip(node.inputs, grads):
                if g is not None and tensor.requires_grad:
                    tensor.accumulate_grad(g)


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape ``loss`` was recorded on."""
    tape = _active_tape()
    if tape is None or loss.node is None:
        raise ValueError("loss is not on an active tape")
    tape.backward(loss)


def _record(op: str, inputs: tuple, out: Tensor, backward_fn) -> None:
    tape = _active_tape()
    if tape is None or not out.requires_grad:
        return
    node = _Node(op, inputs, out, backward_fn)
    out.node = node
    tape.nodes.append(node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes that were broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    sa, sb = a.data.shape, b.data.shape
    _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product (internal general form)."""
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    sa, sb = a.data.shape, b.data.shape
    ad, bd = a.data, b.data
    _record(
        "mul",
        (a, b),
        out,
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
    )
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Strict same-shape Hadamard product: out[i] = a[i] * b[i]."""
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"elementwise_mul needs identical shapes, got {a.data.shape} and {b.data.shape}"
        )
    return mul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading dims follow numpy @ semantics."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs at least 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data
    sa, sb = ad.shape, bd.shape

    def bwd(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), sa)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, sb)
        return ga, gb

    _record("matmul", (a, b), out, bwd)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # Sign-split form: never exponentiates a positive argument.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; saturates smoothly, never overflows."""
    x = _lift(x)
    y = _stable_sigmoid(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)
    _record("sigmoid", (x,), out, lambda g: (g * y * (1.0 - y),))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record("softmax", (x,), out, bwd)
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is [batch, vocab]; ``targets`` is an integer vector. The
    backward rule is the classic (softmax - onehot) / batch.
    """
    logits = _lift(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be 2-d [batch, vocab], got {logits.data.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ValueError(
            f"targets must be a vector of length {logits.data.shape[0]}, got shape {t.shape}"
        )
    vocab = logits.data.shape[1]
    bad = (t < 0) | (t >= vocab)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"target index {int(t[i])} at row {i} out of range [0, {vocab})")

    z = logits.data
    m = np.max(z, axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    nll = lse[:, 0] - z[rows, t]
    out = Tensor(np.float64(np.mean(nll)), requires_grad=logits.requires_grad)

    def bwd(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        p /= z.shape[0]
        return (p * g,)

    _record("softmax_cross_entropy", (logits,), out, bwd)
    return out


def rsqrt(x: Tensor) -> Tensor:
    x = _lift(x)
    y = 1.0 / np.sqrt(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)
    _record("rsqrt", (x,), out, lambda g: (g * (-0.5) * y ** 3,))
    return out


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; backward scatter-adds into the table."""
    table = _lift(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(
            f"index out of range [0, {table.data.shape[0]}): min={idx.min()}, max={idx.max()}"
        )
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)
    tshape = table.data.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=np.float64)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *tshape[1:]))
        return (gt,)

    _record("gather_rows", (table,), out, bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=any(t.requires_grad for t in tensors),
    )
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    _record("concat", tuple(tensors), out, bwd)
    return out


def _reduce(x: Tensor, fwd, bwd_builder, axis, keepdims, name) -> Tensor:
    out = Tensor(fwd(x.data, axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)
    _record(name, (x,), out, bwd_builder(x.data.shape, axis, keepdims))
    return out


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).astype(np.float64, copy=True)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).astype(np.float64, copy=True)


def _sum_backward(shape, axis, keepdims):
    return lambda g: (_expand_reduced(g, shape, axis, keepdims),)


def _mean_backward(shape, axis, keepdims):
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))
    return lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,)


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference probe batch for a single op."""

    op_name: str
    max_rel_error: float
    max_abs_error: float
    probe_count: int
    abs_floor: float = 1e-7

    def ok(self, rel_tol: float = 1e-4) -> bool:
        return self.max_rel_error < rel_tol


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    op_name: str = "f",
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` to central differences.

    Probes every coordinate of ``x`` unless ``probes`` limits it (then a
    seeded random subset is used). Relative error is reported per probe as
    |g_tape - g_fd| / max(|g_tape|, |g_fd|); probes whose absolute error is
    already below ``abs_floor`` count as exact, which is the near-zero
    fallback. Non-finite evaluations of ``f`` are rejected.
    """
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ValueError(f"finite_difference_check needs scalar f, got {y.data.shape}")
        if not np.isfinite(y.data).all():
            raise ValueError("f evaluated to a non-finite value at x")
        tape.backward(y)
    g_tape = np.zeros(x.data.shape) if x.grad is None else x.grad.copy()

    n = x.data.size
    if probes is None or probes >= n:
        idx = np.arange(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        idx = gen.choice(n, size=probes, replace=False)

    flat = x.data.reshape(-1)
    gt = g_tape.reshape(-1)
    max_rel = 0.0
    max_abs = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"f evaluated to a non-finite value near coordinate {i}")
        g_fd = (fp - fm) / (2.0 * h)
        abs_err = abs(gt[i] - g_fd)
        max_abs = max(max_abs, abs_err)
        if abs_err >= abs_floor:
            denom = max(abs(gt[i]), abs(g_fd))
            max_rel = max(max_rel, abs_err / denom)
    return GradCheckReport(
        op_name=op_name,
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        probe_count=int(len(idx)),
        abs_floor=abs_floor,
    )
