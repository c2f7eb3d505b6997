# adamw_ema/autodiff.py
"""
Small dense-tensor engine with reverse-mode differentiation.

Tensors are float64 numpy arrays. A Graph is an append-only list of nodes;
insertion order is the topological order, so every node only refers to
earlier nodes. Leaves are named `input` bindings and fixed `const` tensors.
"""
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from adamw_ema.errors import ConfigError, NonFiniteError, ShapeError

Tensor = np.ndarray

PRIMITIVES = (
    "matmul", "add", "multiply", "mean", "variance",
    "rsqrt", "relu", "softmax_cross_entropy", "reshape",
)
LEAVES = ("input", "const")


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


# ---------- graph ----------
@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: str = ""

    def label(self, index: int) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"node {index} ({self.op}{tag})"


@dataclass(frozen=True)
class Graph:
    nodes: Tuple[Node, ...]
    outputs: Dict[str, int]

    def input_names(self) -> List[str]:
        return [n.name for n in self.nodes if n.op == "input"]

    def input_index(self, name: str) -> Optional[int]:
        for i, n in enumerate(self.nodes):
            if n.op == "input" and n.name == name:
                return i
        return None

    def output_index(self, name: str) -> int:
        if name not in self.outputs:
            raise ConfigError(f"graph has no output named '{name}' (have {sorted(self.outputs)})")
        return self.outputs[name]


class GraphBuilder:
    """Append-only construction; `build()` freezes the result."""

    def __init__(self):
        self._nodes: List[Node] = []
        self._outputs: Dict[str, int] = {}

    def _push(self, op: str, inputs: Sequence[int] = (), name: str = "", **attrs) -> int:
        index = len(self._nodes)
        for i in inputs:
            if not 0 <= i < index:
                raise ShapeError(f"node {index} ({op}) refers to node {i}, which is not an earlier node")
        self._nodes.append(Node(op, tuple(inputs), dict(attrs), name))
        return index

    def input(self, name: str) -> int:
        if any(n.op == "input" and n.name == name for n in self._nodes):
            raise ConfigError(f"duplicate graph input '{name}'")
        return self._push("input", name=name)

    def const(self, value, name: str = "") -> int:
        arr = as_tensor(value).copy()
        arr.setflags(write=False)
        return self._push("const", name=name, value=arr)

    def matmul(self, a: int, b: int, name: str = "") -> int:
        return self._push("matmul", (a, b), name)

    def add(self, a: int, b: int, name: str = "") -> int:
        return self._push("add", (a, b), name)

    def multiply(self, a: int, b: int, name: str = "") -> int:
        return self._push("multiply", (a, b), name)

    def mean(self, a: int, axis: Optional[int] = None, name: str = "") -> int:
        return self._push("mean", (a,), name, axis=axis)

    def variance(self, a: int, axis: Optional[int] = None, name: str = "") -> int:
        return self._push("variance", (a,), name, axis=axis)

    def rsqrt(self, a: int, eps: float = 0.0, name: str = "") -> int:
        return self._push("rsqrt", (a,), name, eps=float(eps))

    def relu(self, a: int, name: str = "") -> int:
        return self._push("relu", (a,), name)

    def softmax_cross_entropy(self, logits: int, targets: int, name: str = "") -> int:
        return self._push("softmax_cross_entropy", (logits, targets), name)

    def reshape(self, a: int, shape: Sequence[int], name: str = "") -> int:
        # one entry may be -1 and is inferred from the input size
        return self._push("reshape", (a,), name, shape=tuple(int(s) for s in shape))

    def negate(self, a: int) -> int:
        return self.multiply(a, self.const(-1.0))

    def output(self, name: str, index: int) -> int:
        if not 0 <= index < len(self._nodes):
            raise ShapeError(f"output '{name}' refers to unknown node {index}")
        self._outputs[name] = index
        return index

    def build(self) -> Graph:
        return Graph(tuple(self._nodes), dict(self._outputs))


# ---------- forward ----------
def _broadcast_ok(a_shape, b_shape) -> bool:
    # second operand may match, drop the leading batch dimension, or be a scalar
    return b_shape == a_shape or b_shape == a_shape[1:] or b_shape == ()


def _log_softmax(z: Tensor) -> Tensor:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _apply(node: Node, args: List[Tensor], index: int) -> Tensor:
    op = node.op
    where = node.label(index)
    if op == "matmul":
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"{where}: cannot multiply {a.shape} by {b.shape}")
        return a @ b
    if op in ("add", "multiply"):
        a, b = args
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"{where}: operand shapes {a.shape} and {b.shape} are incompatible")
        return a + b if op == "add" else a * b
    if op in ("mean", "variance"):
        (a,) = args
        axis = node.attrs.get("axis")
        if axis not in (None, 0) or (axis == 0 and a.ndim == 0):
            raise ShapeError(f"{where}: unsupported axis {axis} for shape {a.shape}")
        fn = np.mean if op == "mean" else np.var
        return as_tensor(fn(a, axis=axis))
    if op == "rsqrt":
        (a,) = args
        with np.errstate(divide="ignore", invalid="ignore"):
            return 1.0 / np.sqrt(a + node.attrs.get("eps", 0.0))
    if op == "relu":
        (a,) = args
        return np.maximum(a, 0.0)
    if op == "softmax_cross_entropy":
        z, y = args
        if z.ndim != 2 or z.shape != y.shape:
            raise ShapeError(f"{where}: logits {z.shape} and targets {y.shape} must be equal 2-d shapes")
        return as_tensor(-(y * _log_softmax(z)).sum(axis=1).mean())
    if op == "reshape":
        (a,) = args
        shape = node.attrs["shape"]
        known = int(np.prod([s for s in shape if s != -1]))
        free = list(shape).count(-1)
        fits = a.size == known if free == 0 else (free == 1 and known > 0 and a.size % known == 0)
        if not fits:
            raise ShapeError(f"{where}: cannot reshape {a.shape} into {shape}")
        return a.reshape(shape)
    raise ShapeError(f"{where}: unknown primitive")


def _evaluate(graph: Graph, inputs: Dict[str, Tensor]) -> List[Tensor]:
    values: List[Tensor] = []
    for i, node in enumerate(graph.nodes):
        if node.op == "input":
            if node.name not in inputs:
                raise ConfigError(f"{node.label(i)} is not bound")
            out = as_tensor(inputs[node.name])
        elif node.op == "const":
            out = node.attrs["value"]
        else:
            out = _apply(node, [values[j] for j in node.inputs], i)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite value at {node.label(i)}", node=i)
        values.append(out)
    return values


def forward(graph: Graph, inputs: Dict[str, Tensor], outputs: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
    values = _evaluate(graph, inputs)
    names = list(outputs) if outputs is not None else list(graph.outputs)
    return {name: values[graph.output_index(name)] for name in names}


# ---------- backward ----------
def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == shape:
        return g
    if shape == ():
        return as_tensor(g.sum())
    return g.sum(axis=0)


def _vjp(node: Node, args: List[Tensor], out: Tensor, g: Tensor) -> List[Optional[Tensor]]:
    op = node.op
    if op == "matmul":
        a, b = args
        return [g @ b.T, a.T @ g]
    if op == "add":
        a, b = args
        return [np.broadcast_to(g, a.shape).copy(), _unbroadcast(g, b.shape)]
    if op == "multiply":
        a, b = args
        return [g * b, _unbroadcast(g * a, b.shape)]
    if op == "mean":
        (a,) = args
        n = a.size if node.attrs.get("axis") is None else a.shape[0]
        return [np.broadcast_to(g / n, a.shape).copy()]
    if op == "variance":
        (a,) = args
        axis = node.attrs.get("axis")
        n = a.size if axis is None else a.shape[0]
        return [2.0 * (a - a.mean(axis=axis)) / n * g]
    if op == "rsqrt":
        return [-0.5 * out ** 3 * g]
    if op == "relu":
        (a,) = args
        return [g * (a > 0.0)]
    if op == "softmax_cross_entropy":
        z, y = args
        logp = _log_softmax(z)
        batch = z.shape[0]
        dz = (np.exp(logp) * y.sum(axis=1, keepdims=True) - y) / batch
        return [dz * g, -logp / batch * g]
    if op == "reshape":
        (a,) = args
        return [g.reshape(a.shape)]
    raise ShapeError(f"no gradient rule for {op}")


def value_and_grad(
    graph: Graph,
    output: str,
    inputs: Dict[str, Tensor],
    wrt: Optional[Iterable[str]] = None,
) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """Forward pass plus one reverse sweep from the scalar `output`."""
    values = _evaluate(graph, inputs)
    out_idx = graph.output_index(output)
    if values[out_idx].shape != ():
        raise ShapeError(f"backward needs a scalar output; '{output}' has shape {values[out_idx].shape}")

    grads: List[Optional[Tensor]] = [None] * len(graph.nodes)
    grads[out_idx] = np.ones((), dtype=np.float64)
    for i in range(out_idx, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.op in LEAVES:
            continue
        args = [values[j] for j in node.inputs]
        for j, gj in zip(node.inputs, _vjp(node, args, values[i], g)):
            if gj is not None:
                grads[j] = gj if grads[j] is None else grads[j] + gj

    result: Dict[str, Tensor] = {}
    for name in (list(wrt) if wrt is not None else graph.input_names()):
        idx = graph.input_index(name)
        if idx is None:
            if name not in inputs:
                raise ConfigError(f"cannot differentiate with respect to unknown tensor '{name}'")
            # detached from the graph
            result[name] = np.zeros_like(as_tensor(inputs[name]))
        else:
            result[name] = np.zeros_like(values[idx]) if grads[idx] is None else grads[idx]
    outs = {name: values[idx] for name, idx in graph.outputs.items()}
    return outs, result


def backward(graph: Graph, output: str, params: Dict[str, Tensor], wrt: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
    return value_and_grad(graph, output, params, wrt)[1]


def finite_difference_grad(fn: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (float(fn(xp)) - float(fn(xm))) / (2.0 * h)
    return grad
