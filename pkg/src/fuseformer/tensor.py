"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node holding its inputs and a
backward closure. ``backward`` traces the graph from a scalar root into a
:class:`GradTape` (a topological ordering of the recorded nodes) and replays
it in reverse, accumulating gradients with ``+=`` across shared
subexpressions. Broadcasting is deliberately restricted to scalar-vs-tensor
and equal shapes; model code reshapes explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeMismatchError

Array = np.ndarray


class TapeNode:
    """One executed operation: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[Array], tuple[Array | None, ...]]):
        self.op = op
        self.inputs = inputs
        self.out: "Tensor" | None = None
        self.backward_fn = backward_fn


class Tensor:
    """Row-major float64 array plus gradient bookkeeping.

    ``grad`` stays ``None`` until a backward pass deposits something; a
    tensor with ``requires_grad=False`` is never written to by backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _track(op: str, inputs: Sequence[Tensor], out_data: Array,
           backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad or t.node is not None for t in inputs):
        node = TapeNode(op, tuple(inputs), backward_fn)
        node.out = out
        out.node = node
    return out


# ---------------------------------------------------------------------------
# elementwise ops (scalar-vs-tensor and equal-shape broadcasting only)
# ---------------------------------------------------------------------------

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(shape: tuple[int, ...], g: Array) -> Array:
    # gradient of a size-1 operand broadcast against a full tensor
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if math.prod(shape) == 1 else g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def backward(g: Array):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return _track("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def backward(g: Array):
        return _reduce_to(a.shape, g * b.data), _reduce_to(b.shape, g * a.data)

    return _track("mul", (a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return _track("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _track("scale", (a,), a.data * c, lambda g: (g * c,))


def _sigmoid_stable(x: Array) -> Array:
    # separate branches so exp never sees a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)
    return _track("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _track("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def backward(g: Array):
        return (g * (a.data > 0.0),)

    return _track("relu", (a,), y, backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        worst = float(np.min(a.data))
        raise DomainError(f"log of non-positive value (min operand {worst})")
    return _track("log", (a,), np.log(a.data), lambda g: (g / a.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU used in the encoder feed-forward block."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def backward(g: Array):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _track("gelu", (a,), y, backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    y = a.data ** e

    def backward(g: Array):
        return (g * e * a.data ** (e - 1.0),) if e != 0.0 else (np.zeros_like(a.data),)

    return _track("pow", (a,), y, backward)


def log_sigmoid(a: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|))."""
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g: Array):
        return (g * _sigmoid_stable(-x),)

    return _track("log_sigmoid", (a,), y, backward)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "neg": neg,
    "scale": scale,
}


def elementwise(kind: str, *operands):
    """Dispatch to the named elementwise operation."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _track("matmul", (a, b), out, backward)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """[N,m,k] @ [N,k,n] with a shared leading extent; used by attention."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeMismatchError(
            f"batched_matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g: Array):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _track("batched_matmul", (a, b), out, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    out = x.data + b.data

    def backward(g: Array):
        lead = tuple(range(g.ndim - 1))
        return g, g.sum(axis=lead)

    return _track("add_bias", (x, b), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to 1 within 1e-12."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ContractError(f"softmax: axis {axis} out of bounds for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: Array):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _track("softmax", (x,), y, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ContractError(f"log_softmax: axis {axis} out of bounds for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g: Array):
        sm = np.exp(y)
        return (g - sm * np.sum(g, axis=axis, keepdims=True),)

    return _track("log_softmax", (x,), y, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize over the last axis, then scale by gamma and shift by beta."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last axis {d}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g: Array):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _track("layer_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# lookup / shaping
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: Array) -> Tensor:
    """Gather rows of ``table`` by integer ids; gradient scatter-adds."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ContractError(
            f"embedding: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g: Array):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _track("embedding", (table,), out, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g: Array):
        return (g.reshape(x.shape),)

    return _track("reshape", (x,), out, backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    out = x.data.transpose(axes)

    def backward(g: Array):
        return (g.transpose(inv),)

    return _track("transpose", (x,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return _track("concat", tuple(tensors), out, backward)


def position_select(x: Tensor, pos: int) -> Tensor:
    """Select one sequence position from a [B, L, H] tensor -> [B, H]."""
    out = x.data[:, pos, :].copy()

    def backward(g: Array):
        dx = np.zeros_like(x.data)
        dx[:, pos, :] = g
        return (dx,)

    return _track("position_select", (x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data))

    def backward(g: Array):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _track("sum", (x,), out, backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(np.sum(x.data) / n)

    def backward(g: Array):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _track("mean", (x,), out, backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class GradTape:
    """Topological ordering of the nodes reachable from one root tensor."""

    def __init__(self, nodes: list[TapeNode]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "GradTape":
        order: list[TapeNode] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(order)
        stack: list[tuple[TapeNode, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def replay_backward(self, root: Tensor, seed: Array) -> None:
        pending: dict[int, Array] = {id(root): seed}
        for node in reversed(self.nodes):
            assert node.out is not None
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.requires_grad:
                node.out.grad = g.copy() if node.out.grad is None else node.out.grad + g
            grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if t.node is not None:
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                elif t.requires_grad:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = GradTape.trace(loss)
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape.replay_backward(loss, seed)


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors in a fixed insertion order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=requires_grad, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def set_requires_grad(self, names: Iterable[str], flag: bool) -> None:
        for name in names:
            self._tensors[name].requires_grad = flag

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def num_parameters(self, names: Iterable[str] | None = None) -> int:
        names = self.names() if names is None else list(names)
        return sum(self._tensors[n].size for n in names)

    def state_bytes(self, names: Iterable[str] | None = None) -> bytes:
        """Little-endian float32 serialization in sorted name order."""
        names = sorted(self.names() if names is None else names)
        chunks = [self._tensors[n].data.astype("<f4").tobytes() for n in names]
        return b"".join(chunks)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class BlockCheck:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    checked: int


@dataclass
class FDReport:
    tol: float
    blocks: list[BlockCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.max_rel_err < self.tol for b in self.blocks)

    def worst(self) -> BlockCheck:
        return max(self.blocks, key=lambda b: b.max_rel_err)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _scalar(t: Tensor) -> float:
    return float(t.data.reshape(-1)[0])


def finite_difference_check(loss_fn: Callable[[], Tensor],
                            params: Iterable[tuple[str, Tensor]],
                            h: float = 1e-5,
                            tol: float = 1e-4,
                            max_coords_per_block: int | None = None,
                            rng: np.random.Generator | None = None,
                            grad_transform: Callable[[str, Array], Array] | None = None
                            ) -> FDReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the forward graph on every call from the current
    parameter values. When ``max_coords_per_block`` is set, a seeded sample of
    coordinates per block is probed instead of an exhaustive sweep.
    ``grad_transform`` lets harness tests corrupt the analytic side.
    """
    if h <= 0:
        raise ContractError(f"finite_difference_check: h must be positive, got {h}")
    params = list(params)
    for _, t in params:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params}
    if grad_transform is not None:
        analytic = {name: grad_transform(name, g) for name, g in analytic.items()}
    if rng is None:
        rng = np.random.default_rng(0)

    report = FDReport(tol=tol)
    for name, t in params:
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_block is not None and n > max_coords_per_block:
            coords = rng.choice(n, size=max_coords_per_block, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        worst_idx: tuple[int, ...] = (0,)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _scalar(loss_fn())
            flat[i] = orig - h
            f_minus = _scalar(loss_fn())
            flat[i] = orig
            estimate = (f_plus - f_minus) / (2.0 * h)
            err = relative_error(float(analytic[name].reshape(-1)[i]), estimate)
            if err > worst:
                worst = err
                worst_idx = np.unravel_index(int(i), t.shape)
        report.blocks.append(BlockCheck(name=name, max_rel_err=worst,
                                        worst_index=tuple(int(v) for v in worst_idx),
                                        checked=len(coords)))
    return report
