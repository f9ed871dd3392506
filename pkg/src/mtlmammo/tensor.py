"""Tensor type and the reverse-mode tape it records onto.

Operations live in :mod:`mtlmammo.functional`; this module only knows how to
store values, record nodes and sweep gradients backwards.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_ACTIVE: list["Graph"] = []


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (bad root, consumed graph...)."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def active_graph() -> Optional["Graph"]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """N-dimensional float array, optionally tracked by a :class:`Graph`.

    Scalars use shape ``(1,)``. ``grad`` is filled for leaf tensors with
    ``requires_grad=True`` after :meth:`Graph.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._graph: Optional[Graph] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return self._node

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    # operator sugar; implementations are in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: tuple


class Graph:
    """Append-only tape. Use as a context manager to make it the active tape.

    Nodes are appended in execution order, so insertion order is a valid
    topological order and ``backward`` is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[Optional[np.ndarray]] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def reset(self) -> None:
        for t in self._leaves.values():
            if t._graph is self:
                t._graph = t._node = None
        self.nodes.clear()
        self.grads.clear()
        self._leaves.clear()
        self._consumed = False

    def _node_of(self, t: Tensor) -> Optional[int]:
        if t._graph is self:
            return t._node
        if not t.requires_grad:
            return None
        # first use of a leaf parameter on this tape
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.shape))
        self.grads.append(None)
        self._leaves[idx] = t
        t._graph, t._node = self, idx
        return idx

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray,
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
        if self._consumed:
            raise GraphError("graph already consumed by backward(); call reset()")
        parents = []
        positions = []
        for pos, t in enumerate(inputs):
            nid = self._node_of(t) if t is not None else None
            if nid is not None:
                parents.append(nid)
                positions.append(pos)
        out = Tensor(value)
        if not parents:
            return out
        n_inputs = len(inputs)

        def routed(g, _fn=backward_fn, _pos=tuple(positions)):
            gs = _fn(g)
            if len(gs) != n_inputs:
                raise GraphError(f"{kind}: backward returned {len(gs)} grads for {n_inputs} inputs")
            return [gs[p] for p in _pos]

        self.nodes.append(Node(kind, tuple(parents), routed, value.shape))
        self.grads.append(None)
        out._graph, out._node = self, len(self.nodes) - 1
        return out

    def backward(self, root: Tensor) -> None:
        if self._consumed:
            raise GraphError("backward() already ran on this graph; call reset() first")
        if root.size != 1:
            raise GraphError(f"backward root must be a scalar, got shape {root.shape}")
        if root._graph is not self:
            raise GraphError("backward root was not produced on this graph")
        self._consumed = True
        grads = self.grads
        grads[root._node] = np.ones(root.shape, dtype=root.dtype)
        for idx in range(root._node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward_fn is None:
                continue
            for pid, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                if pg.shape != self.nodes[pid].shape:
                    raise GraphError(
                        f"{node.kind}: gradient shape {pg.shape} != value shape {self.nodes[pid].shape}")
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
            node.backward_fn = None  # free saved forward values
        for idx, t in self._leaves.items():
            t.grad = grads[idx]

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient buffer for any tensor recorded on this graph."""
        if t._graph is not self:
            return None
        return self.grads[t._node]


def _record(kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward_fn) -> Tensor:
    graph = active_graph()
    if graph is None or not any(t is not None and (t.requires_grad or t._graph is graph) for t in inputs):
        return Tensor(value)
    return graph.record(kind, inputs, value, backward_fn)


# ---- seeded fills -------------------------------------------------------

def rng_for(seed: int, *stream) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``.

    ``stream`` items may be strings (hashed with crc32) or ints.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        words.append(zlib.crc32(s.encode()) if isinstance(s, str) else int(s))
    return np.random.default_rng(np.random.SeedSequence(words))


def uniform(shape, rng: np.random.Generator, low: float = 0.0, high: float = 1.0,
            requires_grad: bool = False) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape).astype(_DEFAULT_DTYPE), requires_grad)


def normal(shape, rng: np.random.Generator, mean: float = 0.0, std: float = 1.0,
           requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(mean, std, size=shape).astype(_DEFAULT_DTYPE), requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)
