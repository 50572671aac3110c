from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from errors import ContractError, NonFiniteError

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# one recording tape per thread/context; worker threads start with none
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the op functions in numerics.ops carry the rules
    def __add__(self, other):
        from numerics import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from numerics import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from numerics import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from numerics import ops
        return ops.mul(self, other)

    def __neg__(self):
        from numerics import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from numerics import ops
        return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class Tape:
    """Record-on-execute list of nodes; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _propagate(self, loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced under this recording tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for node in reversed(self.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            for inp, grad in zip(node.inputs, node.backward_rule(upstream)):
                if grad is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    if id(inp) in leaves:
                        leaves[id(inp)] = (inp, leaves[id(inp)][1] + grad)
                    else:
                        leaves[id(inp)] = (inp, grad)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + grad
                else:
                    pending[id(inp)] = grad
        return leaves

    def backward(self, loss: Tensor) -> None:
        for leaf, grad in self._propagate(loss).values():
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of `loss` w.r.t. `wrt` without touching any .grad slot."""
        leaves = self._propagate(loss)
        out = []
        for t in wrt:
            hit = leaves.get(id(t))
            out.append(np.zeros_like(t.data) if hit is None else hit[1])
        return out


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording, even inside an enclosing Tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced under a recording Tape")
    loss._tape.backward(loss)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Wrap an op result, check it is finite and register it on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out._tape = None
    tape = _active_tape.get()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = Node(op, tuple(inputs), out, rule)
        out._node = node
        out._tape = tape
        tape.nodes.append(node)
    return out
