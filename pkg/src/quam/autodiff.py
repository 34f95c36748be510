"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records forward operations in execution order (which is already a
topological order) and replays them backwards once to accumulate
gradients.  The op set is the minimum needed by small fully connected
networks and their training / search losses; there is no broadcasting
beyond scalars, no control flow and no higher-order derivatives.

Values are float64 throughout.  All operations are deterministic, so a
forward+backward pass repeated on the same inputs is bit-identical.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = ["Tape", "Node", "ShapeMismatch", "OP_KINDS", "grad_check"]

OP_KINDS = (
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "relu",
    "log_softmax",
    "reduce_mean",
    "reduce_sum",
    "square",
    "exp",
    "take_col",
)


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


class Node:
    """Handle to a value recorded on a tape."""

    __slots__ = ("id", "value")

    def __init__(self, node_id: int, value: np.ndarray):
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _same_or_scalar(a: np.ndarray, b: np.ndarray, kind: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatch(f"{kind}: operand shapes {a.shape} and {b.shape} do not match (only scalar broadcast is allowed)")


class Tape:
    """Single-threaded record of forward ops; independent tapes are independent."""

    def __init__(self):
        self._records: list[tuple] = []  # (kind, result_id, input_ids, aux)
        self._values: list[np.ndarray] = []

    def _push(self, value: np.ndarray) -> Node:
        self._values.append(value)
        return Node(len(self._values) - 1, value)

    def leaf(self, x) -> Node:
        """Register an input tensor (parameter or constant)."""
        node = self._push(_as_array(x))
        self._records.append(("leaf", node.id, (), None))
        return node

    # `constant` is an alias: constants take part in the forward pass and
    # simply have their gradients ignored by the caller.
    constant = leaf

    def forward_op(self, kind: str, *inputs, aux=None) -> Node:
        """Apply `kind` to input nodes, record it, and return the result node."""
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        if kind in ("scalar_mul", "take_col") and len(inputs) == 2 and isinstance(inputs[1], (int, float, np.floating, np.integer)):
            aux = inputs[1]
            inputs = inputs[:1]
        vals = []
        ids = []
        for inp in inputs:
            if not isinstance(inp, Node):
                inp = self.leaf(inp)
            vals.append(inp.value)
            ids.append(inp.id)

        if kind == "matmul":
            a, b = vals
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
            out = a @ b
        elif kind == "add":
            a, b = vals
            _same_or_scalar(a, b, "add")
            out = a + b
        elif kind == "sub":
            a, b = vals
            _same_or_scalar(a, b, "sub")
            out = a - b
        elif kind == "mul":
            a, b = vals
            _same_or_scalar(a, b, "mul")
            out = a * b
        elif kind == "scalar_mul":
            (a,) = vals
            out = a * float(aux)
        elif kind == "relu":
            (a,) = vals
            out = np.maximum(a, 0.0)
        elif kind == "log_softmax":
            (a,) = vals
            if a.ndim != 2:
                raise ShapeMismatch(f"log_softmax: expected a 2-d array of row logits, got shape {a.shape}")
            shifted = a - a.max(axis=1, keepdims=True)
            out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        elif kind == "reduce_mean":
            (a,) = vals
            out = np.array(a.mean())
        elif kind == "reduce_sum":
            (a,) = vals
            out = np.array(a.sum())
        elif kind == "square":
            (a,) = vals
            out = a * a
        elif kind == "exp":
            (a,) = vals
            out = np.exp(a)
        elif kind == "take_col":
            (a,) = vals
            j = int(aux)
            if a.ndim != 2 or not (0 <= j < a.shape[1]):
                raise ShapeMismatch(f"take_col: column {j} invalid for shape {a.shape}")
            out = a[:, j : j + 1]

        node = self._push(out)
        self._records.append((kind, node.id, tuple(ids), aux))
        return node

    def backward(self, output: Node) -> dict[int, np.ndarray]:
        """Gradients of a scalar output w.r.t. every recorded node.

        Returns a map node id -> gradient array of that node's shape.
        """
        if output.value.size != 1:
            raise ShapeMismatch(f"backward: output must be scalar, got shape {output.value.shape}")
        grads: dict[int, np.ndarray] = {output.id: np.ones_like(self._values[output.id])}

        def acc(node_id: int, g: np.ndarray):
            ref = self._values[node_id]
            if ref.size == 1 and g.size != 1:
                g = np.array(g.sum()).reshape(ref.shape)
            prev = grads.get(node_id)
            grads[node_id] = g if prev is None else prev + g

        for kind, rid, ids, aux in reversed(self._records):
            if rid not in grads or kind == "leaf":
                continue
            g = grads[rid]
            if kind == "matmul":
                a, b = (self._values[i] for i in ids)
                acc(ids[0], g @ b.T)
                acc(ids[1], a.T @ g)
            elif kind == "add":
                acc(ids[0], g)
                acc(ids[1], g)
            elif kind == "sub":
                acc(ids[0], g)
                acc(ids[1], -g)
            elif kind == "mul":
                a, b = (self._values[i] for i in ids)
                acc(ids[0], g * b)
                acc(ids[1], g * a)
            elif kind == "scalar_mul":
                acc(ids[0], g * float(aux))
            elif kind == "relu":
                a = self._values[ids[0]]
                acc(ids[0], g * (a > 0.0))
            elif kind == "log_softmax":
                out = self._values[rid]
                softmax = np.exp(out)
                acc(ids[0], g - softmax * g.sum(axis=1, keepdims=True))
            elif kind == "reduce_mean":
                a = self._values[ids[0]]
                acc(ids[0], np.full_like(a, g.item() / a.size))
            elif kind == "reduce_sum":
                a = self._values[ids[0]]
                acc(ids[0], np.full_like(a, g.item()))
            elif kind == "square":
                a = self._values[ids[0]]
                acc(ids[0], 2.0 * a * g)
            elif kind == "exp":
                acc(ids[0], g * self._values[rid])
            elif kind == "take_col":
                a = self._values[ids[0]]
                ga = np.zeros_like(a)
                ga[:, int(aux) : int(aux) + 1] = g
                acc(ids[0], ga)
        return grads


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> dict:
    """Compare an analytic gradient against central finite differences.

    `loss_fn(values)` must return (loss, gradient) for a flat parameter
    vector.  Assumes the loss is twice differentiable at `params`; nudge
    inputs away from relu kinks before calling.
    """
    params = np.array(params, dtype=np.float64)  # private copy; callers may pass read-only views
    _, grad = loss_fn(params)
    fd = np.empty_like(params)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += step
        up, _ = loss_fn(bumped)
        bumped[i] -= 2.0 * step
        down, _ = loss_fn(bumped)
        fd[i] = (up - down) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
    rel = np.abs(grad - fd) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return {"max_rel_error": max_rel, "passed": bool(max_rel < tolerance)}
