"""Tensor and tape types for reverse-mode differentiation.

A :class:`Tape` owns an ordered list of records and, after
:func:`backward`, a map from node id to gradient buffer.  A
:class:`Tensor` is an immutable array that optionally carries a node id on
one tape; tensors without a node are constants and never receive gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_MODES = {"float64": np.float64, "float32": np.float32, "test": np.float64, "train": np.float32}
_default_dtype = np.float64


def get_dtype():
    return _default_dtype


def set_precision(mode: str) -> None:
    """Select the working precision: ``"float64"``/``"test"`` or ``"float32"``/``"train"``."""
    global _default_dtype
    try:
        _default_dtype = _MODES[mode]
    except KeyError:
        raise ValueError(f"unknown precision mode {mode!r}") from None


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    global _default_dtype
    previous = _default_dtype
    set_precision(mode)
    try:
        yield
    finally:
        _default_dtype = previous


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: int
    backward: Optional[Callable]
    shape: tuple


@dataclass
class Tape:
    records: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def _new_node(self, kind, inputs, shape, backward_fn) -> int:
        node = len(self.records)
        self.records.append(Record(kind, tuple(inputs), node, backward_fn, tuple(shape)))
        return node

    def watch(self, value, dtype=None) -> "Tensor":
        """Create a leaf tensor whose gradient will be tracked."""
        data = np.array(value, dtype=dtype or _default_dtype)
        return Tensor(data, self._new_node("leaf", (), data.shape, None), self)

    def grad(self, tensor: "Tensor") -> np.ndarray:
        if tensor.tape is not self:
            raise ValueError("tensor is not recorded on this tape")
        g = self.gradients.get(tensor.node)
        return np.zeros_like(tensor.data) if g is None else g

    def gradient(self, loss: "Tensor", targets):
        """Run :func:`backward` from ``loss`` and return gradients for ``targets``.

        ``targets`` may be a single tensor, a sequence or a mapping of tensors;
        the result mirrors its structure.
        """
        backward(self, loss)
        if isinstance(targets, Tensor):
            return self.grad(targets)
        if isinstance(targets, dict):
            return {k: self.grad(t) for k, t in targets.items()}
        return [self.grad(t) for t in targets]


class Tensor:
    """An n-dimensional real array, optionally tracked on a :class:`Tape`."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: Optional[int] = None, tape: Optional[Tape] = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple:
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
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; imported lazily to avoid a module cycle
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_default_dtype))


def constant(value) -> Tensor:
    """Wrap ``value`` as an untracked tensor in the current precision."""
    return Tensor(np.array(value, dtype=_default_dtype))


def backward(tape: Tape, seed) -> dict:
    """Reverse sweep over ``tape`` from the scalar ``seed``.

    ``seed`` is a :class:`Tensor` or a node id.  Gradients are accumulated
    additively per node; the returned map is also stored on ``tape.gradients``.
    """
    if isinstance(seed, Tensor):
        if seed.tape is not tape:
            raise ValueError("seed tensor is not recorded on this tape")
        node = seed.node
    else:
        node = int(seed)
    rec = tape.records[node]
    if int(np.prod(rec.shape)) != 1:
        raise ValueError(f"backward seed must be a scalar, got shape {rec.shape}")
    dtype = seed.dtype if isinstance(seed, Tensor) else _default_dtype
    grads = {node: np.ones(rec.shape, dtype=dtype)}
    for rec in reversed(tape.records[: node + 1]):
        g = grads.get(rec.output)
        if g is None or rec.backward is None:
            continue
        for nid, gi in zip(rec.inputs, rec.backward(g)):
            if nid is None or gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    tape.gradients = grads
    return grads


def record(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``kind`` applied to ``inputs``.

    ``backward_fn(g)`` must return one gradient (or ``None``) per input.
    The result is a constant when no input is tracked.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("cannot combine tensors from different tapes")
    if tape is None:
        return Tensor(data)
    ids = [t.node for t in inputs]
    return Tensor(data, tape._new_node(kind, ids, data.shape, backward_fn), tape)
