"""Dense float32 tensors with a reverse-mode gradient tape.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient. Outside a tape everything runs as plain
numpy, which is what evaluation and the size report use.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> grad(tape, loss)[w.id].data.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name

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
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __deepcopy__(self, memo):
        # copies get fresh ids so gradient maps never alias the original
        t = Tensor(self.data.copy(), self.requires_grad, self.name)
        memo[id(self)] = t
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def relu(self):
        return relu(self)


class _Node:
    __slots__ = ("op", "inputs", "out_id", "backward")

    def __init__(self, op, inputs, out_id, backward):
        self.op = op
        self.inputs = inputs
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> None:
        self._index[out.id] = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), out.id, backward))

    def owns(self, t: Tensor) -> bool:
        return t.id in self._index


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and record ``backward`` on the active tape.

    ``backward(g)`` receives the upstream gradient as an ndarray and returns
    one gradient (or None) per input.
    """
    out = np.asarray(out, dtype=DTYPE)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = False
    t.grad = None
    t.id = next(_ids)
    t.name = None
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.record(op, inputs, t, backward)
    return t


def grad(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    Returns a map from tensor id to gradient. By default every leaf tensor
    with ``requires_grad`` that fed the loss is included; pass ``wrt`` to ask
    for specific (possibly intermediate) tensors instead.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    pos = tape._index.get(loss.id)
    if pos is None:
        if not loss.requires_grad:
            return {}
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: pos + 1]):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id not in tape._index:
                leaves[inp.id] = inp
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi

    if wrt is None:
        return {i: Tensor(grads[i]) for i in sorted(leaves)}
    out = {}
    for t in wrt:
        g = grads.get(t.id)
        out[t.id] = Tensor(np.zeros_like(t.data) if g is None else g)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Like :func:`grad` but stores results in each leaf's ``.grad``."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    pos = tape._index.get(loss.id)
    if pos is None:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: pos + 1]):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in tape._index:
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.astype(DTYPE) if inp.grad is None else inp.grad + gi


class Rng:
    """Seeded generator (PCG64 via numpy); same seed gives the same stream."""

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "Rng":
        # independent deterministic substream for component ``index``
        ss = np.random.SeedSequence([self.seed, int(index)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)


def random_init(shape: Sequence[int], fan_in: int, rng: Rng, requires_grad: bool = True) -> Tensor:
    """Kaiming-style uniform init in [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"zero extent in shape {shape}")
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_op("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_op("log", out, (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_op("relu", np.where(pos, a.data, 0), (a,), lambda g: (g * pos,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_op("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take(a: Tensor, index) -> Tensor:
    shape = a.shape
    advanced = _is_advanced(index)

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_op("take", a.data[index], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))
