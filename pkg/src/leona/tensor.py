"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: just the operations the tagger's forward pass needs,
recorded on an explicit tape and replayed in reverse for gradients.
Everything is numpy under the hood and single-threaded, so identical
seeds and inputs give bit-identical results.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradTable",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "elementwise",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "softmax",
    "logsumexp",
    "tsum",
    "max_over_axis",
    "dropout",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when a forward operation produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on tape misuse (backward without a tape, double backward, ...)."""


TensorLike = Union["Tensor", np.ndarray, float, int, Sequence]
GradTable = Dict["Tensor", np.ndarray]

_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """Immutable dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data: TensorLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # cheap reduction first; a non-finite sum of finite values can only
    # happen on magnitudes near float max, so re-verify before raising
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around the forward computation; inputs always
    precede the operations consuming them, so replaying the record in
    reverse is a valid backward schedule. A tape can be replayed once;
    call reset() to run backward again.
    """

    def __init__(self):
        self._ops: List[Callable[[], None]] = []
        self._produced: set = set()
        self._sources: Dict[int, Tensor] = {}
        self._grads: Dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._ops)

    def watch(self, *tensors: Tensor) -> None:
        """Ensure tensors appear in the gradient table even if unused."""
        for t in tensors:
            if t.requires_grad:
                self._sources[id(t)] = t

    def _record(self, out: Tensor, inputs: Iterable[Tensor], bwd: Callable[[], None]) -> None:
        out.requires_grad = True
        out._tape = self
        self._produced.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._sources[id(t)] = t
        self._ops.append(bwd)

    def _accum(self, t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = g

    def _grad_out(self, out: Tensor) -> Optional[np.ndarray]:
        return self._grads.pop(id(out), None)

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated for t (zeros if it never received one)."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def reset(self) -> None:
        self._grads.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> GradTable:
        """Run the reverse pass from a scalar loss.

        Returns a table mapping every watched source tensor to its
        gradient; sources the loss never touched get zeros.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._consumed = True
        self._grads[id(loss)] = np.ones_like(loss.data)
        for bwd in reversed(self._ops):
            bwd()
        table: GradTable = {}
        for key, t in self._sources.items():
            g = self._grads.get(key)
            table[t] = np.zeros_like(t.data) if g is None else g
        return table


def backward(loss: Tensor) -> GradTable:
    """Reverse pass through the tape that recorded the loss."""
    if loss._tape is None:
        raise TapeError("loss is not attached to a tape")
    return loss._tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(name: str, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc
    _check_finite(data, name)
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and (a.requires_grad or b.requires_grad):

        def bwd():
            g = tape._grad_out(out)
            if g is None:
                return
            if a.requires_grad:
                tape._accum(a, _unbroadcast(da(g), a.shape))
            if b.requires_grad:
                tape._accum(b, _unbroadcast(db(g), b.shape))

        tape._record(out, (a, b), bwd)
    return out


# ops that only move existing values cannot introduce NaN/Inf
_MOVEMENT_OPS = frozenset({"narrow", "transpose", "reshape", "concat"})


def _unary(name: str, a: Tensor, data: np.ndarray, da) -> Tensor:
    if name not in _MOVEMENT_OPS:
        _check_finite(data, name)
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and a.requires_grad:

        def bwd():
            g = tape._grad_out(out)
            if g is not None:
                tape._accum(a, da(g))

        tape._record(out, (a,), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        "mul", a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data
    )


def sigmoid(a: Tensor) -> Tensor:
    # exp(-logaddexp(0, -x)) is stable for large |x|
    y = np.exp(-np.logaddexp(0.0, -a.data))
    return _unary("sigmoid", a, y, lambda g: g * y * (1.0 - y))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _unary("tanh", a, y, lambda g: g * (1.0 - y * y))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _unary("relu", a, y, lambda g: g * mask)


_ELEMENTWISE = {
    "add": lambda a, b: add(a, b),
    "mul": lambda a, b: mul(a, b),
    "sigmoid": lambda a, b: sigmoid(a),
    "tanh": lambda a, b: tanh(a),
    "relu": lambda a, b: relu(a),
}

_BINARY_KINDS = {"add", "mul"}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name (add, mul, sigmoid, tanh, relu)."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind: {op_kind!r}")
    if op_kind in _BINARY_KINDS:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
    elif b is not None:
        raise ValueError(f"{op_kind} takes a single operand")
    return _ELEMENTWISE[op_kind](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    data = a.data @ b.data
    _check_finite(data, "matmul")
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and (a.requires_grad or b.requires_grad):

        def bwd():
            g = tape._grad_out(out)
            if g is None:
                return
            if a.requires_grad:
                tape._accum(a, g @ b.data.T)
            if b.requires_grad:
                tape._accum(b, a.data.T @ g)

        tape._record(out, (a, b), bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    # views are safe: tensors are treated as immutable once created
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return _unary("transpose", a, a.data.T, lambda g: g.T)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _unary("reshape", a, a.data.reshape(shape), lambda g: g.reshape(old))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from exc
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in tensors):
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        parts = tuple(tensors)

        def bwd():
            g = tape._grad_out(out)
            if g is None:
                return
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    tape._accum(t, g[tuple(idx)])

        tape._record(out, parts, bwd)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def da(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return full

    return _unary("narrow", a, a.data[idx], da)


def softmax(a: Tensor, axis: int) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def da(g):
        return (g - (g * y).sum(axis=axis, keepdims=True)) * y

    return _unary("softmax", a, y, da)


def logsumexp(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    y = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    soft = np.exp(x - y)
    if not keepdims:
        y = y.squeeze() if axis is None else y.squeeze(axis=axis)

    def da(g):
        if not keepdims:
            g = np.expand_dims(g, axis) if axis is not None else np.asarray(g).reshape((1,) * x.ndim)
        return g * soft

    return _unary("logsumexp", a, np.asarray(y), da)


def tsum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def da(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", a, np.asarray(y), da)


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    """Reduce one axis by max; the gradient flows only to the first
    (lowest-index) position attaining the maximum."""
    y = a.data.max(axis=axis)
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)

    def da(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return full

    return _unary("max_over_axis", a, y, da)


def dropout(
    a: Tensor,
    rate: float,
    training: bool,
    rng: Union[int, np.random.Generator],
) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-rate), identity in eval."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    scale = 1.0 / (1.0 - rate)
    mask = (gen.random(a.shape) >= rate) * scale
    return _unary("dropout", a, a.data * mask, lambda g: g * mask)
