"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node (parents plus a closure that
maps the output gradient to parent gradients) and a monotonically increasing
sequence number.  ``backward`` collects the nodes reachable from a scalar
loss into a :class:`Tape` ordered by that sequence number and replays it in
reverse, so each recorded operation is visited exactly once.

Storage is a C-contiguous ``numpy.ndarray`` of float64 (row-major, explicit
shape).  Gradients accumulate additively on leaf tensors only; intermediate
gradients live in the tape replay and are discarded afterwards.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = data if data.flags.c_contiguous else data.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str | None = None
        self.seq = -1

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """A named leaf tensor owned by one model; ``frozen`` blocks gradients."""

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
        out.seq = next(_sequence)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- tape ------------------------------------------------------------------

class Tape:
    """Recorded operations reachable from a root, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> list[str]:
        """Propagate ``seed_grad`` backwards; returns the op names visited."""
        grads: dict[int, np.ndarray] = {id(root): seed_grad}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            visited.append(node.op)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    if isinstance(parent, Parameter) and parent.frozen:
                        continue
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        return visited


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if loss._backward is None:
        if loss.requires_grad and not (isinstance(loss, Parameter) and loss.frozen):
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return tape
    tape.replay(loss, np.ones_like(loss.data))
    return tape


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), bw, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record(a.data - b.data, (a, b), bw, "subtract")


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _record(a.data * b.data, (a, b), bw, "hadamard")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "divide")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), bw, "divide")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


_ELEMENTWISE = {"add": add, "hadamard": hadamard, "subtract": subtract}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``hadamard``, ``subtract`` or ``relu``."""
    if kind == "relu":
        return relu(as_tensor(a))
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if b is None:
        raise DimensionError(f"{kind} needs two operands")
    return fn(a, b)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; a 1-D operand is treated as a row (left) or column (right) vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2 and a.shape[0] == b.shape[-2]:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[-1]:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = np.matmul(g.reshape(-1, g.shape[-1]), b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold the batch dims into one product instead of summing per-batch outer products
                gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def matmul_nt(a, b) -> Tensor:
    """``a @ bᵀ`` for 2-D operands without materializing the transpose."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt: cannot multiply {a.shape} by the transpose of {b.shape}")
    out = a.data @ b.data.T

    def bw(g):
        return (g @ b.data if a.requires_grad else None,
                g.T @ a.data if b.requires_grad else None)

    return _record(out, (a, b), bw, "matmul_nt")


# -- reductions and shape ops ----------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _record(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bw, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0
                   else reshape(t, t.shape + (1,)) for t in tensors], axis=axis)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _record(out, (a,), bw, "getitem")


def take(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (grad,)

    return _record(out, (table,), bw, "take")


def segment_sum(values: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets by segment id."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != values.shape[0]:
        raise DimensionError(f"segment_sum: {segments.shape[0]} ids for {values.shape[0]} rows")
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, segments, values.data)
    return _record(out, (values,), lambda g: (g[segments],), "segment_sum")


# -- normalisation ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gn = g * gain.data
            gx = inv_std * (gn - gn.mean(axis=-1, keepdims=True)
                            - normed * (gn * normed).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _unbroadcast(g * normed, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _record(out, (x, gain, bias), bw, "layer_norm")


# -- convolution -----------------------------------------------------------

def conv2d(inputs: Tensor, kernels: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1, no padding.

    ``inputs`` is ``c×h×w`` or batched ``N×c×h×w``; ``kernels`` is ``o×c×kh×kw``.
    """
    batched = inputs.ndim == 4
    x = inputs.data if batched else inputs.data[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks {inputs.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c or kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kernels.shape} does not fit input {inputs.shape}")
    oh, ow = h - kh + 1, w - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, kernels.data, optimize=True)

    def bw(g):
        g4 = g if batched else g[None]
        gx = gk = None
        if inputs.requires_grad:
            gx = np.zeros_like(x)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + oh, j:j + ow] += np.einsum("nohw,oc->nchw", g4, kernels.data[:, :, i, j])
            if not batched:
                gx = gx[0]
        if kernels.requires_grad:
            gk = np.einsum("nchwij,nohw->ocij", windows, g4, optimize=True)
        return gx, gk

    return _record(out if batched else out[0], (inputs, kernels), bw, "conv2d")


# -- losses ----------------------------------------------------------------

def cross_entropy_smoothed(logits: Tensor, targets, epsilon: float = 0.0) -> Tensor:
    """Batch-mean label-smoothed cross-entropy.

    Gold class gets weight ``1 - epsilon``; each other class gets
    ``epsilon / (C - 1)``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_smoothed: logits must be B×C, got {logits.shape}")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    batch, classes = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != batch:
        raise DimensionError(f"{targets.shape[0]} targets for batch of {batch}")
    if np.any(targets < 0) or np.any(targets >= classes):
        raise IndexError(f"target index out of range [0, {classes})")
    if classes == 1 and epsilon > 0:
        raise DimensionError("label smoothing needs at least two classes")

    weights = np.full((batch, classes), epsilon / (classes - 1) if classes > 1 else 0.0)
    weights[np.arange(batch), targets] = 1.0 - epsilon
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(weights * logp).sum() / batch
    probs = np.exp(logp)

    def bw(g):
        # weights rows sum to 1, so d/dlogits = p - w
        return (g * (probs - weights) / batch,)

    return _record(np.asarray(loss), (logits,), bw, "cross_entropy_smoothed")


def segment_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax over the rows of ``scores`` that share a segment id.

    Normalises along axis 0 within each segment, independently for every
    trailing position.  Empty segments are ignored.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != scores.shape[0]:
        raise DimensionError(f"segment_softmax: {segments.shape[0]} ids for {scores.shape[0]} rows")
    peak = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(peak, segments, scores.data)
    e = np.exp(scores.data - peak[segments])
    denom = np.zeros((num_segments,) + scores.shape[1:])
    np.add.at(denom, segments, e)
    out = e / denom[segments]

    def bw(g):
        weighted = np.zeros((num_segments,) + scores.shape[1:])
        np.add.at(weighted, segments, g * out)
        return (out * (g - weighted[segments]),)

    return _record(out, (scores,), bw, "segment_softmax")
