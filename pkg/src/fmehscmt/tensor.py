"""Dense tensor, named parameters, and the reverse-mode tape.

A :class:`Tape` is created explicitly for every differentiable forward pass.
Operations record themselves on the tape carried by their inputs; tensors
without a tape are plain constants and cost nothing beyond the numpy work.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

FLOAT32 = np.float32
FLOAT64 = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by '{op}'")


class Tensor:
    """Rank-<=4 real array with an optional gradient slot and tape handle."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data, dtype=None, *, tape: Optional["Tape"] = None,
                 node_id: Optional[int] = None, check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (FLOAT32, FLOAT64):
            arr = arr.astype(FLOAT32)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        if check:
            check_finite(arr, "Tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops
        return ops.sum_all(self)


@dataclass
class Parameter:
    """A named trainable tensor.

    ``kind`` drives optimizer policy: only ``"weight"`` parameters receive
    weight decay.
    """

    name: str
    tensor: Tensor
    trainable: bool = True
    kind: str = "weight"

    def __post_init__(self):
        segments = self.name.split(".")
        if not self.name or any(s == "" for s in segments):
            raise ContractError(f"invalid parameter name {self.name!r}")

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @grad.setter
    def grad(self, value) -> None:
        self.tensor.grad = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


@dataclass
class _Node:
    parents: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they execute, so list order is a topological
    order and the reverse sweep in :meth:`backward` visits each node once.
    """

    nodes: List[_Node] = field(default_factory=list)
    _watched: Dict[int, object] = field(default_factory=dict)
    _bound: Dict[int, Tensor] = field(default_factory=dict)
    _released: bool = False

    def _new_node(self, parents, backward, op) -> int:
        if self._released:
            raise ContractError(f"{op}: tape already consumed by a backward pass")
        self.nodes.append(_Node(tuple(parents), backward, op))
        return len(self.nodes) - 1

    def watch(self, source) -> Tensor:
        """Bind a Parameter (or raw Tensor) to this tape as a leaf.

        Parameters are bound at most once per tape; repeated calls return the
        same leaf so gradients from every use accumulate into one slot.
        """
        key = id(source)
        if key in self._bound:
            return self._bound[key]
        base = source.tensor if isinstance(source, Parameter) else source
        nid = self._new_node((), None, "leaf")
        leaf = Tensor(base.data, tape=self, node_id=nid, check=False)
        self._watched[nid] = source
        self._bound[key] = leaf
        return leaf

    def record(self, out: np.ndarray, parents: Sequence, backward: BackwardFn,
               op: str) -> Tensor:
        check_finite(out, op)
        ids = tuple(p.node_id if isinstance(p, Tensor) and p.tape is self else None
                    for p in parents)
        if all(i is None for i in ids):
            return Tensor(out, check=False)
        nid = self._new_node(ids, backward, op)
        return Tensor(out, tape=self, node_id=nid, check=False)

    def backward(self, loss: Tensor) -> None:
        """Fill ``grad`` on every watched source with d(loss)/d(source).

        Watched sources the loss does not depend on receive zeros. Each node's
        closure is dropped once it has run and the whole graph is released at
        the end, so a tape supports a single backward pass.
        """
        if self._released:
            raise ContractError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss was not produced on this tape")
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None) if nid not in self._watched else grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            node.backward = None
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        for nid, source in self._watched.items():
            target = source.tensor if isinstance(source, Parameter) else source
            g = grads.get(nid)
            target.grad = np.zeros_like(target.data) if g is None else g.reshape(target.data.shape)
        self.release()

    def release(self) -> None:
        """Drop recorded closures; they hold activations and form reference
        cycles with the tape that would otherwise wait for the cyclic GC."""
        self.nodes.clear()
        self._bound.clear()
        self._watched.clear()
        self._released = True


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
