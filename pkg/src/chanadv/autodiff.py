"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it; the
tape then replays them backwards in :meth:`Tape.backward`.  Outside a tape
every operation is a plain numpy computation and nothing is recorded, which
is what inference code relies on.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(w * w)
    >>> _ = tape.backward(loss)
    >>> tape.grad(w)
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "ShapeError",
    "record",
    "active_tape",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "matmul",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "l2_normalize",
    "gradcheck",
]


class AutodiffError(RuntimeError):
    """Misuse of the tape (double backward, foreign tensors, bad loss)."""


class ShapeError(ValueError):
    pass


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An n-d float64 array, optionally tied to a node on a tape.

    ``requires_grad`` marks a leaf (typically a parameter) whose gradient is
    wanted.  Leaves never carry a ``node_id``; the tape keeps its own
    leaf-to-node map so the same parameter can be reused across steps.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = False
        t.node_id = None
        t.tape = None
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("vjp", "parents", "shape")

    def __init__(self, vjp, parents, shape):
        self.vjp = vjp
        self.parents = parents
        self.shape = shape


class Tape:
    """Records operations in execution order; use one tape per training step."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []
        self._grads: list[np.ndarray | None] | None = None

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def _node_of(self, t: Tensor) -> int | None:
        if t.tape is not None:
            if t.tape is not self:
                raise AutodiffError("tensor belongs to a different tape")
            return t.node_id
        if not t.requires_grad:
            return None
        nid = self._leaves.get(id(t))
        if nid is None:
            nid = len(self._nodes)
            self._nodes.append(_Node(None, (), t.shape))
            self._leaves[id(t)] = nid
            self._leaf_refs.append(t)
        return nid

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a differentiable leaf and return its node id."""
        t.requires_grad = True
        return self._node_of(t)

    def node_id_of(self, t: Tensor) -> int | None:
        if t.tape is self:
            return t.node_id
        return self._leaves.get(id(t))

    def _record(self, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
        if self._grads is not None:
            raise AutodiffError("tape already differentiated; start a new tape")
        parents = tuple(self._node_of(t) for t in inputs)
        result = Tensor._wrap(out)
        if all(p is None for p in parents):
            return result
        result.node_id = len(self._nodes)
        result.tape = self
        self._nodes.append(_Node(vjp, parents, out.shape))
        return result

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Propagate d(loss)/d(node) to every recorded node.

        Returns a map from node id to gradient; nodes the loss does not depend
        on get zeros.  A tape can be differentiated only once.
        """
        if self._grads is not None:
            raise AutodiffError("backward() already ran on this tape")
        if loss.size != 1:
            raise AutodiffError(f"loss must be a scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise AutodiffError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones(loss.shape)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            node = self._nodes[nid]
            if g is None or node.vjp is None:
                continue
            in_grads = node.vjp(g)
            for pid, pg in zip(node.parents, in_grads):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        for nid, node in enumerate(self._nodes):
            if grads[nid] is None:
                grads[nid] = np.zeros(node.shape)
        self._grads = grads
        return {nid: Tensor._wrap(g) for nid, g in enumerate(grads)}

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the differentiated loss w.r.t. ``t`` (zeros if unused)."""
        if self._grads is None:
            raise AutodiffError("call backward() first")
        nid = self.node_id_of(t)
        if nid is None:
            return np.zeros(t.shape)
        return self._grads[nid]


def record(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as the result of an op over ``inputs``.

    ``vjp(g)`` must return one gradient (or None) per input.  With no active
    tape the result is a constant tensor and ``vjp`` is dropped.
    """
    tape = active_tape()
    if tape is None:
        return Tensor._wrap(out)
    return tape._record(out, inputs, vjp)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return record(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return record(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value")
    return record(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "negate": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name; ``scale-by-constant`` takes a float as ``b``."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale-by-constant":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        out = np.array(a.data.sum())
        return record(out, (a,), lambda g: (np.full(shape, float(g)),))
    out = a.data.sum(axis=axis)
    return record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * axis + (index,), g)
        return (out,)

    return record(np.take(a.data, index, axis=axis), (a,), vjp)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    x = a.data
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero row")
    y = x / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return record(y, (a,), vjp)


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is evaluated at ``x`` (perturbed in place, then restored), so ``x``
    may be a parameter that ``f`` closes over.  Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            out = f(x)
        if out.size != 1:
            raise AutodiffError(f"gradcheck needs a scalar function, got shape {out.shape}")
        tape.backward(out)
        analytic = tape.grad(x).copy()
    finally:
        x.requires_grad = was
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2 * eps)
    analytic = analytic.reshape(-1)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise FloatingPointError("non-finite value during gradcheck")
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
