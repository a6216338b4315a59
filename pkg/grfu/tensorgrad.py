"""
Dense float64 tensors with an explicit recording graph for reverse-mode gradients.

Recording is opt-in: ops are only recorded while a GradGraph is active on the
current thread and at least one input is linked to it. Outside a graph the same
ops just compute values, so evaluation allocates no graph at all.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError

logger = logging.getLogger("grfu.tensorgrad")

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_graph() -> Optional["GradGraph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of float64 values, optionally linked to a GradGraph."""

    __slots__ = ("values", "node", "graph")

    def __init__(self, values, node: Optional[int] = None, graph: Optional["GradGraph"] = None):
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        self.values = arr
        self.node = node
        self.graph = graph

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Optional[int] = None,
              graph: Optional["GradGraph"] = None) -> "Tensor":
        # Op outputs are fresh arrays, no copy needed
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        out.values = arr
        out.node = node
        out.graph = graph
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values)

    def __repr__(self) -> str:
        linked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{linked})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("hadamard", self, other)


class _Entry:
    __slots__ = ("kind", "inputs", "output", "cache")

    def __init__(self, kind: str, inputs: Tuple[Optional[int], ...], output: int, cache: dict):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.cache = cache


class GradGraph:
    """
    Ordered record of operations. Entries are appended as ops run, so every
    input node precedes its consumer. Use as a context manager to activate
    recording on the current thread.
    """

    def __init__(self):
        self.entries: List[_Entry] = []
        self.parameters: Dict[str, int] = {}
        self._shapes: List[Tuple[int, ...]] = []

    def __enter__(self) -> "GradGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def _new_node(self, shape: Tuple[int, ...]) -> int:
        self._shapes.append(tuple(shape))
        return len(self._shapes) - 1

    def parameter(self, tensor: Tensor, name: str) -> Tensor:
        """Register a leaf whose gradient backward() must report."""
        if name in self.parameters:
            raise ContractError(f"parameter '{name}' already registered on this graph")
        node = self._new_node(tensor.shape)
        self.parameters[name] = node
        return Tensor._wrap(tensor.values, node=node, graph=self)

    def record(self, kind: str, inputs: Sequence[Tensor], values: np.ndarray, cache: dict) -> Tensor:
        ids = tuple(t.node if t.graph is self else None for t in inputs)
        node = self._new_node(np.shape(values))
        self.entries.append(_Entry(kind, ids, node, cache))
        return Tensor._wrap(values, node=node, graph=self)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    stack = _graph_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(kind: str, inputs: Sequence[Tensor], values: np.ndarray, cache: dict) -> Tensor:
    graph = _active_graph()
    if graph is not None and any(t.graph is graph for t in inputs):
        return graph.record(kind, inputs, values, cache)
    return Tensor._wrap(values)


# ====== BACKWARD RULES ======
# Each rule maps (upstream gradient, cache) to one gradient per input.

def _matmul_backward(g, cache):
    a, b = cache["a"], cache["b"]
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = b if b.ndim == 2 else b[:, None]
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def _concat_backward(g, cache):
    bounds = np.cumsum(cache["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=cache["axis"]))


def _slice_backward(g, cache):
    full = np.zeros(cache["shape"])
    full[..., cache["start"]:cache["stop"]] = g
    return (full,)


def _select_backward(g, cache):
    full = np.zeros(cache["shape"])
    full[np.arange(len(cache["index"])), cache["index"]] = g
    return (full,)


def _log_softmax_backward(g, cache):
    soft = np.exp(cache["out"])
    return (g - soft * g.sum(axis=-1, keepdims=True),)


BACKWARD_RULES: Dict[str, Callable] = {
    "matmul": _matmul_backward,
    "transpose": lambda g, c: (g.T,),
    "add": lambda g, c: (g, g),
    "sub": lambda g, c: (g, -g),
    "hadamard": lambda g, c: (g * c["b"], g * c["a"]),
    "divide": lambda g, c: (g / c["b"], -g * c["out"] / c["b"]),
    "sigmoid": lambda g, c: (g * c["out"] * (1.0 - c["out"]),),
    "tanh": lambda g, c: (g * (1.0 - c["out"] * c["out"]),),
    # subgradient 0 at exactly 0
    "relu": lambda g, c: (g * (c["x"] > 0.0),),
    "exp": lambda g, c: (g * c["out"],),
    "log": lambda g, c: (g / c["x"],),
    "clamp": lambda g, c: (g * ((c["x"] >= c["lo"]) & (c["x"] <= c["hi"])),),
    "scale": lambda g, c: (g * c["factor"],),
    "concat": _concat_backward,
    "slice_cols": _slice_backward,
    "repeat_rows": lambda g, c: (g.sum(axis=0),),
    "sum_all": lambda g, c: (np.full(c["shape"], float(g)),),
    "mean_all": lambda g, c: (np.full(c["shape"], float(g) / c["count"]),),
    "log_softmax": _log_softmax_backward,
    "select": _select_backward,
}


# ====== OPERATIONS ======

def _require_rank(t: Tensor, ranks: Tuple[int, ...], op: str) -> None:
    if t.ndim not in ranks:
        raise DimensionError(f"{op} expects rank in {ranks}", t.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Rank-1 operands act as row (left) or column (right) vectors."""
    _require_rank(a, (1, 2), "matmul")
    _require_rank(b, (1, 2), "matmul")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    return _emit("matmul", (a, b), a.values @ b.values, {"a": a.values, "b": b.values})


def transpose(a: Tensor) -> Tensor:
    _require_rank(a, (2,), "transpose")
    return _emit("transpose", (a,), a.values.T.copy(), {})


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """add, sub, hadamard or divide of two tensors with identical shapes."""
    if a.shape != b.shape:
        raise DimensionError(f"elementwise {kind} needs identical shapes", a.shape, b.shape)
    if kind == "add":
        return _emit(kind, (a, b), a.values + b.values, {})
    if kind == "sub":
        return _emit(kind, (a, b), a.values - b.values, {})
    if kind == "hadamard":
        return _emit(kind, (a, b), a.values * b.values, {"a": a.values, "b": b.values})
    if kind == "divide":
        out = a.values / b.values
        return _emit(kind, (a, b), out, {"b": b.values, "out": out})
    raise ContractError(f"unknown elementwise kind '{kind}'")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("hadamard", a, b)


def divide(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("divide", a, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, a: Tensor) -> Tensor:
    """Elementwise nonlinearity: sigmoid, tanh, relu, exp or log."""
    x = a.values
    if kind == "sigmoid":
        out = _sigmoid(x)
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "exp":
        out = np.exp(x)
    elif kind == "log":
        out = np.log(x)
    else:
        raise ContractError(f"unknown activation '{kind}'")
    return _emit(kind, (a,), out, {"x": x, "out": out})


def sigmoid(a: Tensor) -> Tensor:
    return activation("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return activation("tanh", a)


def relu(a: Tensor) -> Tensor:
    return activation("relu", a)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    return _emit("clamp", (a,), np.clip(a.values, lo, hi), {"x": a.values, "lo": lo, "hi": hi})


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", (a,), a.values * factor, {"factor": float(factor)})


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    rank = tensors[0].ndim
    axis = axis % rank
    for t in tensors[1:]:
        other = [d for i, d in enumerate(t.shape) if i != axis]
        first = [d for i, d in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != rank or other != first:
            raise DimensionError("concat shapes disagree off the join axis", tensors[0].shape, t.shape)
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", tuple(tensors), values, {"sizes": sizes, "axis": axis})


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range", a.shape)
    return _emit("slice_cols", (a,), a.values[..., start:stop].copy(),
                 {"shape": a.shape, "start": start, "stop": stop})


def repeat_rows(v: Tensor, rows: int) -> Tensor:
    """Tile a vector into a rows x d matrix; the explicit stand-in for broadcasting."""
    _require_rank(v, (1,), "repeat_rows")
    return _emit("repeat_rows", (v,), np.tile(v.values, (rows, 1)), {})


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", (a,), np.array(a.values.sum()), {"shape": a.shape})


def mean_all(a: Tensor) -> Tensor:
    return _emit("mean_all", (a,), np.array(a.values.mean()), {"shape": a.shape, "count": a.size})


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    x = a.values
    shift = x.max(axis=-1, keepdims=True)
    out = x - shift - np.log(np.exp(x - shift).sum(axis=-1, keepdims=True))
    return _emit("log_softmax", (a,), out, {"out": out})


def select(a: Tensor, index: Sequence[int]) -> Tensor:
    """Pick one column per row of a 2-D tensor."""
    _require_rank(a, (2,), "select")
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise DimensionError("select needs one index per row", a.shape, index.shape)
    return _emit("select", (a,), a.values[np.arange(a.shape[0]), index],
                 {"shape": a.shape, "index": index})


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape))


# ====== GRADIENTS ======

def backward(graph: GradGraph, loss: Tensor) -> Dict[str, Tensor]:
    """
    Reverse sweep over the recorded entries.

    Args:
        graph: the graph the loss was recorded on
        loss: scalar tensor

    Returns:
        Gradient per registered parameter name; parameters the loss does not
        depend on get zeros of matching shape.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {}
    if loss.graph is graph and loss.node is not None:
        grads[loss.node] = np.ones(loss.shape)

    for entry in reversed(graph.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        input_grads = BACKWARD_RULES[entry.kind](g, entry.cache)
        for node, ig in zip(entry.inputs, input_grads):
            if node is None:
                continue
            grads[node] = grads[node] + ig if node in grads else ig

    return {
        name: Tensor._wrap(grads[node] if node in grads else np.zeros(graph._shapes[node]))
        for name, node in graph.parameters.items()
    }


class GradCheckReport:
    """Finite-difference comparison of backward() against central differences."""

    def __init__(self, per_parameter: Dict[str, float], step: float):
        self.per_parameter = per_parameter
        self.step = step
        self.max_error = max(per_parameter.values(), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_error < tolerance

    def worst(self) -> Optional[str]:
        if not self.per_parameter:
            return None
        return max(self.per_parameter, key=self.per_parameter.get)


def _scalar_value(loss: Tensor) -> float:
    value = float(np.sum(loss.values))
    if not np.isfinite(value):
        raise EvaluationError(f"function value is not finite: {value}")
    return value


def grad_check(function: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, Tensor],
               step: float = 1e-5) -> GradCheckReport:
    """
    Compare analytic gradients with (f(θ+step) − f(θ−step)) / (2·step), coordinate by
    coordinate. Relative error uses max(|analytic|, |numeric|, 1e−8) as denominator.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")

    with GradGraph() as graph:
        linked = {name: graph.parameter(p, name) for name, p in params.items()}
        loss = function(linked)
        _scalar_value(loss)
    analytic = backward(graph, loss)

    errors: Dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            worst = 0.0
            base = p.values
            for idx in np.ndindex(*base.shape):
                shifted = dict(params)
                plus = base.copy()
                plus[idx] += step
                shifted[name] = Tensor._wrap(plus)
                f_plus = _scalar_value(function(shifted))
                minus = base.copy()
                minus[idx] -= step
                shifted[name] = Tensor._wrap(minus)
                f_minus = _scalar_value(function(shifted))

                numeric = (f_plus - f_minus) / (2.0 * step)
                exact = float(analytic[name].values[idx])
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
                worst = max(worst, err)
            errors[name] = worst

    report = GradCheckReport(errors, step)
    logger.debug(f"grad_check over {len(params)} parameters: max relative error {report.max_error:.3e}")
    return report
