"""
Reverse-mode differentiation over a recorded tape of float64 tensor operations.

Forward values are computed eagerly with torch and every recorded node keeps the
torch autograd function of its output as its backward rule. The tape adds the
contract the rest of the package relies on: a fixed op vocabulary, scalar-only
broadcasting, hard errors on domain violations and a single backward per tape.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from src.app.errors import (
    AutodiffError,
    DomainError,
    NonFiniteError,
    ShapeMismatchError,
    TapeError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SOFTPLUS_FLOOR = float(np.finfo(np.float64).tiny)

_local = threading.local()


def _tape_stack() -> list["Tape | None"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """Return the innermost tape recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording: operations inside run as plain forward evaluations."""
    stack = _tape_stack()
    stack.append(None)
    try:
        with torch.no_grad():
            yield
    finally:
        stack.pop()


class Tensor:
    """N-dimensional float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 1000

    def __init__(self, values: Any, requires_grad: bool = False, name: str | None = None) -> None:
        if isinstance(values, Tensor):
            values = values.data
        data = torch.as_tensor(values, dtype=DTYPE).detach().clone()
        if requires_grad:
            data.requires_grad_(True)
        self.data = data
        self.name = name
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, data: torch.Tensor) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.tape = None
        out.node_id = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.dim()

    @property
    def size(self) -> int:
        return self.data.numel()

    @property
    def requires_grad(self) -> bool:
        return self.data.requires_grad

    @property
    def values(self) -> torch.Tensor:
        return self.data.detach()

    @property
    def grad(self) -> torch.Tensor | None:
        if self.data.is_leaf or self.data.retains_grad:
            return self.data.grad
        return None

    def numpy(self) -> np.ndarray:
        return self.data.detach().numpy().copy()

    def item(self) -> float:
        return float(self.data.detach().reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return record("add", [self, other])

    def __radd__(self, other: Any) -> "Tensor":
        return record("add", [other, self])

    def __sub__(self, other: Any) -> "Tensor":
        return record("sub", [self, other])

    def __rsub__(self, other: Any) -> "Tensor":
        return record("sub", [other, self])

    def __mul__(self, other: Any) -> "Tensor":
        return record("mul", [self, other])

    def __rmul__(self, other: Any) -> "Tensor":
        return record("mul", [other, self])

    def __truediv__(self, other: Any) -> "Tensor":
        return record("div", [self, other])

    def __rtruediv__(self, other: Any) -> "Tensor":
        return record("div", [other, self])

    def __neg__(self) -> "Tensor":
        return record("neg", [self])

    def __matmul__(self, other: Any) -> "Tensor":
        return record("matmul", [self, other])

    def __pow__(self, exponent: float) -> "Tensor":
        return record("power", [self], exponent=float(exponent))

    def __getitem__(self, index: Any) -> "Tensor":
        return record("slice", [self], index=index)

    def sum(self, axis: int | None = None) -> "Tensor":
        return record("sum", [self], axis=axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return record("mean", [self], axis=axis)


def _lift(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    """One recorded operation: its kind, parent handles and output."""
    op: str
    parents: tuple[int, ...]
    output: Tensor


class Tape:
    """Append-only record of operations; used as a context manager to activate recording."""

    def __init__(self, retain_grads: bool = True) -> None:
        self.nodes: list[Node] = []
        self.retain_grads = retain_grads
        self.backward_done = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def track(self, tensor: Tensor) -> int:
        """Return the node handle of `tensor`, registering parameters as leaves on first use."""
        if tensor.tape is self and tensor.node_id is not None:
            return tensor.node_id
        if tensor.data.grad_fn is not None:
            raise TapeError("Tensor was recorded on a different tape",
                            details=repr(tensor))
        return self.append("leaf", (), tensor)

    def append(self, op: str, parents: tuple[int, ...], output: Tensor) -> int:
        if op != "leaf" and self.retain_grads:
            output.data.retain_grad()
        node_id = len(self.nodes)
        output.tape = self
        output.node_id = node_id
        self.nodes.append(Node(op, parents, output))
        return node_id

    def reset(self) -> None:
        """Forget all recorded nodes so the tape can record and differentiate again."""
        for node in self.nodes:
            node.output.tape = None
            node.output.node_id = None
        self.nodes.clear()
        self.backward_done = False


@dataclass(frozen=True)
class _OpRule:
    check: Callable[[str, list[Tensor], dict[str, Any]], None]
    forward: Callable[..., torch.Tensor]


def _shapes(inputs: Sequence[Tensor]) -> str:
    return ", ".join(str(t.shape) for t in inputs)


def _check_arity(op: str, inputs: list[Tensor], count: int) -> None:
    if len(inputs) != count:
        raise ShapeMismatchError(f"{op}: expected {count} operand(s), got {len(inputs)}",
                                 details=_shapes(inputs))


def _check_unary(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 1)


def _check_positive(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 1)
    if bool((inputs[0].values <= 0).any()):
        raise DomainError(f"{op}: input must be strictly positive",
                          details=f"min value {float(inputs[0].values.min())}")


def _check_elementwise(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 2)
    a, b = inputs
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}",
                                 details="element-wise operations broadcast only scalar against array")


def _check_matmul(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 2)
    a, b = inputs
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}",
                                 details=_shapes(inputs))


def _check_reduce(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 1)
    axis = attrs.get("axis")
    if axis is not None and not -inputs[0].ndim <= axis < inputs[0].ndim:
        raise ShapeMismatchError(f"{op}: axis {axis} out of range for shape {inputs[0].shape}")


def _check_power(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 1)
    exponent = attrs["exponent"]
    values = inputs[0].values
    if not float(exponent).is_integer() and bool((values < 0).any()):
        raise DomainError("power: negative base with non-integer exponent",
                          details=f"exponent {exponent}")
    if exponent < 0 and bool((values == 0).any()):
        raise DomainError("power: zero base with negative exponent", details=f"exponent {exponent}")


def _check_clamp(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 1)
    if attrs["low"] > attrs["high"]:
        raise AutodiffError("clamp: lower bound exceeds upper bound",
                            details=f"[{attrs['low']}, {attrs['high']}]")


def _check_concat(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    if not inputs:
        raise ShapeMismatchError("concat: no operands")
    axis = attrs.get("axis", 0)
    first = inputs[0]
    for other in inputs[1:]:
        if other.ndim != first.ndim:
            raise ShapeMismatchError("concat: operands differ in rank", details=_shapes(inputs))
        for dim in range(first.ndim):
            if dim != axis % first.ndim and other.shape[dim] != first.shape[dim]:
                raise ShapeMismatchError(f"concat: shapes disagree off axis {axis}",
                                         details=_shapes(inputs))


def _check_any(op: str, inputs: list[Tensor], attrs: dict[str, Any]) -> None:
    _check_arity(op, inputs, 1)


def _elementwise(fn: Callable[..., torch.Tensor]) -> Callable[..., torch.Tensor]:
    def forward(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        out = fn(a, b)
        # a size-1 operand never changes the rank of the other
        if a.numel() == 1 and b.numel() != 1:
            return out.reshape(b.shape)
        if b.numel() == 1 and a.numel() != 1:
            return out.reshape(a.shape)
        return out
    return forward


def _reduce(fn: Callable[..., torch.Tensor]) -> Callable[..., torch.Tensor]:
    def forward(a: torch.Tensor, axis: int | None = None) -> torch.Tensor:
        return fn(a) if axis is None else fn(a, dim=axis)
    return forward


_OPS: dict[str, _OpRule] = {
    "add": _OpRule(_check_elementwise, _elementwise(torch.add)),
    "sub": _OpRule(_check_elementwise, _elementwise(torch.sub)),
    "mul": _OpRule(_check_elementwise, _elementwise(torch.mul)),
    "div": _OpRule(_check_elementwise, _elementwise(torch.div)),
    "neg": _OpRule(_check_unary, torch.neg),
    "matmul": _OpRule(_check_matmul, torch.matmul),
    "sum": _OpRule(_check_reduce, _reduce(torch.sum)),
    "mean": _OpRule(_check_reduce, _reduce(torch.mean)),
    "sin": _OpRule(_check_unary, torch.sin),
    "cos": _OpRule(_check_unary, torch.cos),
    "exp": _OpRule(_check_unary, torch.exp),
    "log": _OpRule(_check_positive, torch.log),
    "sqrt": _OpRule(_check_positive, torch.sqrt),
    "relu": _OpRule(_check_unary, torch.relu),
    "sigmoid": _OpRule(_check_unary, torch.sigmoid),
    "softplus": _OpRule(_check_unary, F.softplus),
    "power": _OpRule(_check_power, lambda a, exponent: torch.pow(a, exponent)),
    # torch.clamp passes gradient only inside [low, high]
    "clamp": _OpRule(_check_clamp, lambda a, low, high: torch.clamp(a, low, high)),
    "concat": _OpRule(_check_concat, lambda *xs, axis=0: torch.cat(xs, dim=axis)),
    "slice": _OpRule(_check_any, lambda a, index: a[index]),
    # ties go to the first operand
    "maximum": _OpRule(_check_elementwise, _elementwise(lambda a, b: torch.where(a >= b, a, b))),
}

OP_KINDS = tuple(_OPS)


def record(op: str, inputs: Sequence[Any], **attrs: Any) -> Tensor:
    """Evaluate `op` eagerly and append it to the active tape when any input is differentiable."""
    rule = _OPS.get(op)
    if rule is None:
        raise TapeError(f"Unsupported operation '{op}'", details=", ".join(OP_KINDS))
    operands = [_lift(x) for x in inputs]
    rule.check(op, operands, attrs)

    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in operands)
    try:
        if tracked:
            parents = tuple(tape.track(t) for t in operands if t.requires_grad)
            data = rule.forward(*(t.data for t in operands), **attrs)
        else:
            with torch.no_grad():
                data = rule.forward(*(t.data for t in operands), **attrs)
    except (IndexError, RuntimeError) as e:
        raise ShapeMismatchError(f"{op}: invalid operands {_shapes(operands)}",
                                 details=str(e)) from e

    out = Tensor._wrap(data)
    if tracked:
        tape.append(op, parents, out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into the grad of every tensor on the loss's tape."""
    if loss.size != 1:
        raise ShapeMismatchError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = active_tape()
    if tape is None or loss.tape is not tape:
        raise TapeError("backward: loss does not belong to the active tape")
    if tape.backward_done:
        raise TapeError("backward: already ran on this tape, call reset() first")
    loss.data.backward(torch.ones_like(loss.data))
    tape.backward_done = True
    logger.debug("Backward pass over %d recorded nodes", len(tape))


def sin(x: Tensor) -> Tensor:
    return record("sin", [x])


def cos(x: Tensor) -> Tensor:
    return record("cos", [x])


def exp(x: Tensor) -> Tensor:
    return record("exp", [x])


def log(x: Tensor) -> Tensor:
    return record("log", [x])


def sqrt(x: Tensor) -> Tensor:
    return record("sqrt", [x])


def relu(x: Tensor) -> Tensor:
    return record("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return record("sigmoid", [x])


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    return record("clamp", [x], low=float(low), high=float(high))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return record("maximum", [a, b])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return record("concat", list(tensors), axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return record("matmul", [a, b])


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow- and underflow-safe form; maps reals onto positive values."""
    return record("softplus", [x])


def inverse_softplus(y: float) -> float:
    """
    Unconstrained value whose softplus is `y`.

    Zero is mapped to the smallest positive float, so non-negative parameters can be
    set to exactly representable near-zero values.
    """
    if y < 0 or not np.isfinite(y):
        raise DomainError("inverse_softplus: value must be finite and non-negative", details=str(y))
    y = max(float(y), SOFTPLUS_FLOOR)
    return float(y + np.log(-np.expm1(-y)))


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor, one row each."""
    return concat([row[None, :] for row in rows], axis=0)


def ones(*shape: int) -> Tensor:
    return Tensor(torch.ones(*shape, dtype=DTYPE))


def _evaluate_at(fn: Callable[[list[Tensor]], Tensor], params: list[Tensor], where: str) -> float:
    with no_grad():
        value = fn(params).item()
    if not np.isfinite(value):
        raise NonFiniteError("grad_check: function is not finite", details=where)
    return value


def grad_check(fn: Callable[[list[Tensor]], Tensor], point: Sequence[Any],
               step: float = 1e-5) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        fn: Maps a list of parameter tensors to a scalar tensor.
        point: Initial values, one entry per parameter.
        step: Central-difference step.

    Returns:
        float: max over all entries of |analytic - central| / max(1, |central|).
    """
    if step <= 0:
        raise AutodiffError("grad_check: step must be positive", details=str(step))

    params = [Tensor(p, requires_grad=True) for p in point]
    with Tape(retain_grads=False):
        value = fn(params)
        if value.size != 1:
            raise ShapeMismatchError(f"grad_check: function must be scalar, got {value.shape}")
        if not np.isfinite(value.item()):
            raise NonFiniteError("grad_check: function is not finite", details="base point")
        if value.requires_grad:
            backward(value)

    worst = 0.0
    for index, param in enumerate(params):
        grad = param.grad
        analytic = (torch.zeros_like(param.values) if grad is None else grad).reshape(-1)
        flat = param.data.detach().view(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + step
            f_plus = _evaluate_at(fn, params, f"parameter {index}[{i}] + step")
            flat[i] = original - step
            f_minus = _evaluate_at(fn, params, f"parameter {index}[{i}] - step")
            flat[i] = original
            central = (f_plus - f_minus) / (2.0 * step)
            error = abs(float(analytic[i]) - central) / max(1.0, abs(central))
            worst = max(worst, error)
    return worst
