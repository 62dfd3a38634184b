"""
Reverse-mode differentiation over float64 arrays, plus finite-difference oracles.

Every op is a method on `Tape`; the tape records nodes in creation order,
which is also a topological order, so `backward` is a single reverse sweep.
Masks and data enter as constants and never receive gradients.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from infrastructure.errors import ContractError, DimensionError, EvaluationError
from services.tensor_core import masked_contract


@dataclass
class Node:
    id: int
    value: np.ndarray
    # (parent id, local-gradient rule tag)
    parents: list = field(default_factory=list)
    grad: Optional[np.ndarray] = None
    requires_grad: bool = True
    is_leaf: bool = False
    name: str = ""
    vjp: Optional[Callable] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Single-threaded recording of one computation. Build a fresh tape per step."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.root_id: Optional[int] = None

    # ----------------------------------
    # NODE CREATION
    # ----------------------------------
    def _record(self, value, parents, tag, vjp) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(
            id=len(self.nodes),
            value=value,
            parents=[(p.id, tag) for p in parents],
            requires_grad=any(p.requires_grad for p in parents),
            vjp=vjp,
        )
        self.nodes.append(node)
        return node

    def leaf(self, value, name="") -> Node:
        """A differentiable input (parameter)."""
        node = Node(id=len(self.nodes), value=np.array(value, dtype=np.float64),
                    is_leaf=True, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value, name="") -> Node:
        """Data or mask: participates in the forward pass, never differentiated."""
        node = Node(id=len(self.nodes), value=np.asarray(value, dtype=np.float64),
                    requires_grad=False, is_leaf=True, name=name)
        self.nodes.append(node)
        return node

    # ----------------------------------
    # OPS
    # ----------------------------------
    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._record(a.value + b.value, [a, b], "add", lambda g: (g, g))

    def add_bias(self, a: Node, bias: Node) -> Node:
        """Row-broadcast bias: (B×D) + (D)."""
        if a.value.ndim != 2 or bias.shape != (a.shape[1],):
            raise DimensionError(f"add_bias: bias {bias.shape} does not fit {a.shape}")
        return self._record(a.value + bias.value, [a, bias], "add_bias",
                            lambda g: (g, g.sum(axis=0)))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
        av, bv = a.value, b.value
        return self._record(av * bv, [a, b], "mul", lambda g: (g * bv, g * av))

    def scale(self, a: Node, factor) -> Node:
        """Multiply by a constant scalar or constant tensor of the same shape."""
        factor = np.asarray(factor, dtype=np.float64)
        if factor.ndim and factor.shape != a.shape:
            raise DimensionError(f"scale: factor {factor.shape} does not fit {a.shape}")
        return self._record(a.value * factor, [a], "scale", lambda g: (g * factor,))

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        av, bv = a.value, b.value
        return self._record(av @ bv, [a, b], "matmul", lambda g: (g @ bv.T, av.T @ g))

    def masked_matmul(self, x: Node, w: Node, mask) -> Node:
        """Per-sample masked product; `mask` is a constant B×Din or B×Din×Dout array."""
        mask = np.asarray(mask, dtype=np.float64)
        xv, wv = x.value, w.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
            raise DimensionError(f"masked_matmul: input {xv.shape} does not fit weight {wv.shape}")
        if mask.shape == xv.shape:
            def vjp(g):
                return (g @ wv.T) * mask, (xv * mask).T @ g
        elif mask.shape == (xv.shape[0],) + wv.shape:
            def vjp(g):
                dx = np.einsum("bj,bij,ij->bi", g, mask, wv)
                dw = np.einsum("bj,bi,bij->ij", g, xv, mask)
                return dx, dw
        else:
            raise DimensionError(f"masked_matmul: mask {mask.shape} fits neither {xv.shape} "
                                 f"nor {(xv.shape[0],) + wv.shape}")
        return self._record(masked_contract(xv, wv, mask), [x, w], "masked_matmul", vjp)

    def relu(self, a: Node) -> Node:
        # subgradient at 0 is 0
        active = (a.value > 0).astype(np.float64)
        return self._record(a.value * active, [a], "relu", lambda g: (g * active,))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._record(out, [a], "exp", lambda g: (g * out,))

    def log(self, a: Node) -> Node:
        av = a.value
        return self._record(np.log(av), [a], "log", lambda g: (g / av,))

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        inside = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
        return self._record(np.clip(a.value, lo, hi), [a], "clip", lambda g: (g * inside,))

    def sigmoid(self, a: Node) -> Node:
        out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._record(out, [a], "sigmoid", lambda g: (g * out * (1.0 - out),))

    def softmax(self, a: Node) -> Node:
        """Row-wise softmax over the last axis."""
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._record(out, [a], "softmax", vjp)

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._record(a.value.sum(), [a], "sum", lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a: Node) -> Node:
        shape, n = a.shape, a.value.size
        return self._record(a.value.mean(), [a], "mean",
                            lambda g: (np.broadcast_to(g / n, shape).copy(),))


def backward(tape: Tape, root: Node) -> dict:
    """
    Accumulates d(root)/d(leaf) for every differentiable leaf recorded on `tape`.
    Returns {leaf id: gradient}; each node's `grad` is populated as well.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape.root_id = root.id

    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)

    # creation order is topological: one reverse sweep visits each node once
    for node in reversed(tape.nodes[: root.id + 1]):
        if node.grad is None or node.vjp is None:
            continue
        parent_grads = node.vjp(node.grad)
        for (parent_id, _tag), g in zip(node.parents, parent_grads):
            parent = tape.nodes[parent_id]
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g

    grads = {}
    for node in tape.nodes:
        if node.is_leaf and node.requires_grad:
            grads[node.id] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads


# ----------------------------------
# NUMERICAL ORACLES
# ----------------------------------
def _evaluate(f, x) -> float:
    value = float(f(x))
    if not np.isfinite(value):
        raise EvaluationError(f"Function returned a non-finite value ({value})")
    return value


def finite_diff_grad(f, at, eps: float = 1e-6) -> np.ndarray:
    """Central differences (f(x+εe_i) − f(x−εe_i)) / 2ε for every element of `at`."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    x = np.array(at, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = _evaluate(f, x)
        flat_x[i] = orig - eps
        f_minus = _evaluate(f, x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def hessian_diag(f, at, eps: float = 1e-4) -> np.ndarray:
    """Second-order central differences (f(x+εe_i) − 2f(x) + f(x−εe_i)) / ε²."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    x = np.array(at, dtype=np.float64)
    f0 = _evaluate(f, x)
    diag = np.zeros_like(x)
    flat_x, flat_d = x.reshape(-1), diag.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = _evaluate(f, x)
        flat_x[i] = orig - eps
        f_minus = _evaluate(f, x)
        flat_x[i] = orig
        flat_d[i] = (f_plus - 2 * f0 + f_minus) / (eps * eps)
    return diag


def relative_error(a, b) -> float:
    """‖a − b‖ / (‖a‖ + ‖b‖), zero when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
