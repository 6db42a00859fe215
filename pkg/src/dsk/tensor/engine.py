"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tape` records operations as they execute; `Tape.backward` replays them in
reverse to accumulate gradients. Only tensors created through `Tape.watch`
(or derived from them) participate in differentiation; everything else is a
constant and receives no gradient work.

Broadcasting is deliberately restricted to scalar-with-tensor and
equal-shape operands. Shape mismatches raise immediately with both shapes
named, rather than silently broadcasting.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Tape", "Gradients", "ShapeError"]


class ShapeError(ValueError):
    pass


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(arr)


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return shape == () or shape == (1,)


class Tensor:
    """A float64 array, optionally attached to a computation tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_array(values)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    # -- reductions ------------------------------------------------------

    def sum(self) -> "Tensor":
        return _reduce(self, np.sum(self.data), lambda g, t=self: np.full(t.shape, g))

    def mean(self) -> "Tensor":
        n = self.size
        return _reduce(self, np.mean(self.data), lambda g, t=self, n=n: np.full(t.shape, g / n))

    def sum_sq(self) -> "Tensor":
        d = self.data
        return _reduce(self, np.sum(d * d), lambda g, d=d: (2.0 * g) * d)


class Tape:
    """Ordered record of operations; replayable in reverse for gradients.

    Operations are appended in execution order, so the record is
    topologically sorted by construction. `backward` visits each recorded
    operation exactly once, accumulating adjoints over fan-out.
    """

    def __init__(self):
        self._next_id = 0
        # entries: (out_node, in_nodes tuple[int | None], backward fn)
        # backward fn maps the output adjoint to a tuple of input adjoints,
        # with None in slots whose input is untracked.
        self._entries: list[tuple[int, tuple, object]] = []

    def _new_node(self) -> int:
        nid = self._next_id
        self._next_id = nid + 1
        return nid

    def watch(self, values) -> Tensor:
        """Register an array as a differentiable leaf on this tape."""
        return Tensor(values, tape=self, node=self._new_node())

    def record(self, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        out = Tensor(out_data, tape=self, node=self._new_node())
        in_nodes = tuple(t.node if (t.tape is self) else None for t in inputs)
        self._entries.append((out.node, in_nodes, backward))
        return out

    def backward(self, loss: Tensor) -> "Gradients":
        """Accumulate d(loss)/d(node) for every tracked node feeding `loss`."""
        if loss.tape is not self or not loss.tracked:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        adjoint: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for out_node, in_nodes, bwd in reversed(self._entries):
            g = adjoint.pop(out_node, None)
            if g is None:
                continue
            in_grads = bwd(g)
            for node, grad in zip(in_nodes, in_grads):
                if node is None or grad is None:
                    continue
                acc = adjoint.get(node)
                adjoint[node] = grad if acc is None else acc + grad
        return Gradients(self, adjoint)


class Gradients:
    """Result of a backward pass. Untouched leaves get an exact-zero gradient."""

    def __init__(self, tape: Tape, table: dict[int, np.ndarray]):
        self._tape = tape
        self._table = table

    def wrt(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or not tensor.tracked:
            raise ValueError("tensor does not belong to the differentiated tape")
        g = self._table.get(tensor.node)
        return np.zeros(tensor.shape) if g is None else g


# ---------------------------------------------------------------------------
# op plumbing


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)

def _active_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _result(out_data, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape(*inputs)
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, inputs, backward)


def needs_grad(t: Tensor) -> bool:
    return t.tape is not None and t.tracked


def _reduce(t: Tensor, value, grad_fn) -> Tensor:
    out = np.asarray(value, dtype=np.float64)
    return _result(out, (t,), lambda g, fn=grad_fn: (fn(float(g.reshape(()))),))


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    """Classify a binary op as scalar-tensor, tensor-scalar or equal-shape."""
    if a.shape == b.shape:
        return "equal"
    if _is_scalar_shape(a.shape):
        return "scalar_left"
    if _is_scalar_shape(b.shape):
        return "scalar_right"
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape} "
                     "(only scalar-with-tensor and equal-shape operands are supported)")


def _unbroadcast_scalar(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.sum(grad).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_shapes(a, b, "add")

    def backward(g, kind=kind, ash=a.shape, bsh=b.shape):
        ga = _unbroadcast_scalar(g, ash) if kind == "scalar_left" else g
        gb = _unbroadcast_scalar(g, bsh) if kind == "scalar_right" else g
        return (ga if needs_a else None, gb if needs_b else None)

    needs_a, needs_b = needs_grad(a), needs_grad(b)
    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_shapes(a, b, "sub")

    def backward(g, kind=kind, ash=a.shape, bsh=b.shape):
        ga = _unbroadcast_scalar(g, ash) if kind == "scalar_left" else g
        gb = -(_unbroadcast_scalar(g, bsh) if kind == "scalar_right" else g)
        return (ga if needs_a else None, gb if needs_b else None)

    needs_a, needs_b = needs_grad(a), needs_grad(b)
    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g, kind=kind, ash=a.shape, bsh=b.shape):
        ga = gb = None
        if needs_a:
            ga = g * bd
            if kind == "scalar_left":
                ga = _unbroadcast_scalar(ga, ash)
        if needs_b:
            gb = g * ad
            if kind == "scalar_right":
                gb = _unbroadcast_scalar(gb, bsh)
        return (ga, gb)

    needs_a, needs_b = needs_grad(a), needs_grad(b)
    return _result(ad * bd, (a, b), backward)


def scale(t, c: float) -> Tensor:
    t = _lift(t)
    c = float(c)
    return _result(t.data * c, (t,), lambda g, c=c: (g * c,))
