"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations as they execute (dynamic graph,
one tape per objective evaluation) and replays them in reverse to
accumulate gradients of a scalar objective with respect to any recorded
variables.  Activation derivatives are primitives in their own right,
so expressions that already contain an input gradient of a network stay
differentiable with respect to the network parameters without any
higher-order machinery.

Tensors are plain ``numpy.ndarray`` objects in float64; they are treated
as immutable once recorded.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes do not conform to a primitive's signature."""


class TapeError(ValueError):
    """Raised on structural misuse: foreign variables, non-scalar objectives."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Variable:
    """Handle to a node on a tape: an id plus the node's shape."""

    __slots__ = ("tape", "id", "shape")

    def __init__(self, tape: "Tape", node_id: int, shape: tuple):
        self.tape = tape
        self.id = node_id
        self.shape = shape

    @property
    def value(self) -> np.ndarray:
        return self.tape.node_value(self)

    # Arithmetic sugar so problem drivers read naturally.  Non-Variable
    # operands are wrapped as tape constants (or scalar multiplications).
    def __add__(self, other):
        return self.tape.add(self, self.tape.lift(other))

    def __radd__(self, other):
        return self.tape.add(self.tape.lift(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self.tape.lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.smul(self, float(other))
        return self.tape.mul(self, self.tape.lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.tape.smul(self, -1.0)


class _Node:
    __slots__ = ("op", "parents", "value", "requires_grad", "vjp")

    def __init__(self, op, parents, value, requires_grad, vjp):
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        # vjp: adjoint -> sequence of (parent_id, contribution); only
        # parents that require gradients receive contributions.
        self.vjp = vjp


class Tape:
    """Topologically ordered record of primitive operations.

    Nodes only ever reference earlier nodes, so a single reverse sweep
    over ids visits each node exactly once.  Construction and backward
    are single-threaded; independent tapes may run concurrently.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    # ------------------------------------------------------------------
    # node plumbing

    def _append(self, op, parents, value, vjp) -> Variable:
        rg = any(self._nodes[p].requires_grad for p in parents) if vjp else False
        node = _Node(op, parents, value, rg, vjp if rg else None)
        self._nodes.append(node)
        return Variable(self, len(self._nodes) - 1, value.shape)

    def _check(self, var: Variable, op: str) -> _Node:
        if var.tape is not self:
            raise TapeError(f"op '{op}': variable belongs to a different tape")
        return self._nodes[var.id]

    def node_value(self, var: Variable) -> np.ndarray:
        return self._check(var, "value").value

    def constant(self, value) -> Variable:
        """Leaf that never receives a gradient."""
        v = _as_array(value)
        node = _Node("constant", (), v, False, None)
        self._nodes.append(node)
        return Variable(self, len(self._nodes) - 1, v.shape)

    def param(self, value) -> Variable:
        """Leaf tracked for gradients."""
        v = _as_array(value)
        node = _Node("param", (), v, True, None)
        self._nodes.append(node)
        return Variable(self, len(self._nodes) - 1, v.shape)

    def lift(self, x) -> Variable:
        return x if isinstance(x, Variable) else self.constant(x)

    # ------------------------------------------------------------------
    # elementwise arithmetic

    def _binary_shapes(self, op, a, b):
        na, nb = self._check(a, op), self._check(b, op)
        if na.value.shape != nb.value.shape and na.value.shape != () and nb.value.shape != ():
            raise ShapeMismatchError(f"{op}: shapes {na.value.shape} and {nb.value.shape}")
        return na, nb

    def add(self, a: Variable, b: Variable) -> Variable:
        na, nb = self._binary_shapes("add", a, b)
        val = na.value + nb.value

        def vjp(g):
            out = []
            if na.requires_grad:
                out.append((a.id, _reduce_to(g, na.value.shape)))
            if nb.requires_grad:
                out.append((b.id, _reduce_to(g, nb.value.shape)))
            return out

        return self._append("add", (a.id, b.id), val, vjp)

    def sub(self, a: Variable, b: Variable) -> Variable:
        na, nb = self._binary_shapes("sub", a, b)
        val = na.value - nb.value

        def vjp(g):
            out = []
            if na.requires_grad:
                out.append((a.id, _reduce_to(g, na.value.shape)))
            if nb.requires_grad:
                out.append((b.id, _reduce_to(-g, nb.value.shape)))
            return out

        return self._append("sub", (a.id, b.id), val, vjp)

    def mul(self, a: Variable, b: Variable) -> Variable:
        na, nb = self._binary_shapes("mul", a, b)
        val = na.value * nb.value
        av, bv = na.value, nb.value

        def vjp(g):
            out = []
            if na.requires_grad:
                out.append((a.id, _reduce_to(g * bv, na.value.shape)))
            if nb.requires_grad:
                out.append((b.id, _reduce_to(g * av, nb.value.shape)))
            return out

        return self._append("mul", (a.id, b.id), val, vjp)

    def smul(self, a: Variable, c: float) -> Variable:
        na = self._check(a, "smul")
        c = float(c)
        val = na.value * c

        def vjp(g):
            return [(a.id, g * c)] if na.requires_grad else []

        return self._append("smul", (a.id,), val, vjp)

    def square(self, a: Variable) -> Variable:
        na = self._check(a, "square")
        av = na.value
        val = av * av

        def vjp(g):
            return [(a.id, g * (2.0 * av))] if na.requires_grad else []

        return self._append("square", (a.id,), val, vjp)

    # ------------------------------------------------------------------
    # linear algebra

    def matmul(self, a: Variable, b: Variable) -> Variable:
        na, nb = self._check(a, "matmul"), self._check(b, "matmul")
        av, bv = na.value, nb.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeMismatchError(f"matmul: shapes {av.shape} and {bv.shape}")
        val = av @ bv

        def vjp(g):
            out = []
            if na.requires_grad:
                out.append((a.id, g @ bv.T))
            if nb.requires_grad:
                out.append((b.id, av.T @ g))
            return out

        return self._append("matmul", (a.id, b.id), val, vjp)

    def transpose(self, a: Variable) -> Variable:
        na = self._check(a, "transpose")
        if na.value.ndim != 2:
            raise ShapeMismatchError(f"transpose: shape {na.value.shape}")
        val = na.value.T.copy()

        def vjp(g):
            return [(a.id, g.T)] if na.requires_grad else []

        return self._append("transpose", (a.id,), val, vjp)

    def affine(self, x: Variable, w: Variable, b: Variable) -> Variable:
        """x @ w + b with the bias broadcast across rows."""
        nx, nw, nb = self._check(x, "affine"), self._check(w, "affine"), self._check(b, "affine")
        xv, wv, bv = nx.value, nw.value, nb.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
            raise ShapeMismatchError(
                f"affine: x {xv.shape}, w {wv.shape}, b {bv.shape}"
            )
        val = xv @ wv + bv

        def vjp(g):
            out = []
            if nx.requires_grad:
                out.append((x.id, g @ wv.T))
            if nw.requires_grad:
                out.append((w.id, xv.T @ g))
            if nb.requires_grad:
                out.append((b.id, g.sum(axis=0)))
            return out

        return self._append("affine", (x.id, w.id, b.id), val, vjp)

    def batch_matvec(self, mats: np.ndarray, v: Variable) -> Variable:
        """Per-row matrix-vector product with a constant (B,d,d) stack."""
        nv = self._check(v, "batch_matvec")
        mats = _as_array(mats)
        vv = nv.value
        if mats.ndim != 3 or vv.ndim != 2 or mats.shape[0] != vv.shape[0] or mats.shape[2] != vv.shape[1]:
            raise ShapeMismatchError(f"batch_matvec: mats {mats.shape}, v {vv.shape}")
        val = np.einsum("bij,bj->bi", mats, vv)

        def vjp(g):
            if not nv.requires_grad:
                return []
            return [(v.id, np.einsum("bij,bi->bj", mats, g))]

        return self._append("batch_matvec", (v.id,), val, vjp)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, a: Variable) -> Variable:
        na = self._check(a, "sum")
        shape = na.value.shape
        val = np.asarray(na.value.sum())

        def vjp(g):
            return [(a.id, np.broadcast_to(g, shape).copy())] if na.requires_grad else []

        return self._append("sum", (a.id,), val, vjp)

    def mean(self, a: Variable) -> Variable:
        na = self._check(a, "mean")
        shape = na.value.shape
        n = na.value.size
        val = np.asarray(na.value.mean())

        def vjp(g):
            if not na.requires_grad:
                return []
            return [(a.id, np.broadcast_to(g / n, shape).copy())]

        return self._append("mean", (a.id,), val, vjp)

    def row_sum(self, a: Variable) -> Variable:
        """Sum over the last axis, keeping a (B, 1) column."""
        na = self._check(a, "row_sum")
        if na.value.ndim != 2:
            raise ShapeMismatchError(f"row_sum: shape {na.value.shape}")
        val = na.value.sum(axis=1, keepdims=True)
        width = na.value.shape[1]

        def vjp(g):
            if not na.requires_grad:
                return []
            return [(a.id, np.repeat(g, width, axis=1))]

        return self._append("row_sum", (a.id,), val, vjp)

    def row_dot(self, a: Variable, b: Variable) -> Variable:
        """Row-wise inner product of two (B, d) arrays, yielding (B, 1)."""
        na, nb = self._check(a, "row_dot"), self._check(b, "row_dot")
        av, bv = na.value, nb.value
        if av.shape != bv.shape or av.ndim != 2:
            raise ShapeMismatchError(f"row_dot: shapes {av.shape} and {bv.shape}")
        val = np.einsum("bj,bj->b", av, bv)[:, None]

        def vjp(g):
            out = []
            if na.requires_grad:
                out.append((a.id, g * bv))
            if nb.requires_grad:
                out.append((b.id, g * av))
            return out

        return self._append("row_dot", (a.id, b.id), val, vjp)

    def segment_sum(self, a: Variable, segment_ids: np.ndarray, num_segments: int) -> Variable:
        """Sum (K, 1) rows into (num_segments, 1) buckets given per-row ids."""
        na = self._check(a, "segment_sum")
        av = na.value
        ids = np.asarray(segment_ids, dtype=np.int64)
        if av.ndim != 2 or av.shape[1] != 1 or ids.shape != (av.shape[0],):
            raise ShapeMismatchError(f"segment_sum: values {av.shape}, ids {ids.shape}")
        val = np.zeros((num_segments, 1))
        np.add.at(val, ids, av)

        def vjp(g):
            return [(a.id, g[ids])] if na.requires_grad else []

        return self._append("segment_sum", (a.id,), val, vjp)

    def slice_rows(self, a: Variable, start: int, stop: int) -> Variable:
        na = self._check(a, "slice_rows")
        av = na.value
        if av.ndim != 2 or not (0 <= start <= stop <= av.shape[0]):
            raise ShapeMismatchError(f"slice_rows: shape {av.shape}, rows [{start}:{stop}]")
        val = av[start:stop].copy()

        def vjp(g):
            if not na.requires_grad:
                return []
            out = np.zeros_like(av)
            out[start:stop] = g
            return [(a.id, out)]

        return self._append("slice_rows", (a.id,), val, vjp)

    def block_mean(self, a: Variable, n_blocks: int) -> Variable:
        """Means over consecutive equal-size row blocks of a column."""
        na = self._check(a, "block_mean")
        av = na.value
        if av.ndim != 2 or av.shape[1] != 1 or n_blocks < 1 or av.shape[0] % n_blocks:
            raise ShapeMismatchError(f"block_mean: shape {av.shape} into {n_blocks} blocks")
        block = av.shape[0] // n_blocks
        val = av.reshape(n_blocks, block).mean(axis=1, keepdims=True)

        def vjp(g):
            if not na.requires_grad:
                return []
            out = np.repeat(g / block, block, axis=0)
            return [(a.id, out)]

        return self._append("block_mean", (a.id,), val, vjp)

    def slice_cols(self, a: Variable, start: int, stop: int) -> Variable:
        na = self._check(a, "slice_cols")
        av = na.value
        if av.ndim != 2 or not (0 <= start <= stop <= av.shape[1]):
            raise ShapeMismatchError(f"slice_cols: shape {av.shape}, cols [{start}:{stop}]")
        val = av[:, start:stop].copy()

        def vjp(g):
            if not na.requires_grad:
                return []
            out = np.zeros_like(av)
            out[:, start:stop] = g
            return [(a.id, out)]

        return self._append("slice_cols", (a.id,), val, vjp)

    # ------------------------------------------------------------------
    # activations and their derivative primitives

    def _unary(self, op, a, fwd, grad_factory):
        na = self._check(a, op)
        val = fwd(na.value)
        grad_fn = grad_factory(na.value, val)

        def vjp(g):
            return [(a.id, g * grad_fn())] if na.requires_grad else []

        return self._append(op, (a.id,), val, vjp)

    def tanh(self, a: Variable) -> Variable:
        return self._unary("tanh", a, np.tanh, lambda x, y: (lambda: 1.0 - y * y))

    def tanh_prime(self, a: Variable) -> Variable:
        # d/dx tanh'(x) = -2 tanh(x) (1 - tanh(x)^2)
        na = self._check(a, "tanh_prime")
        t = np.tanh(na.value)
        val = 1.0 - t * t

        def vjp(g):
            return [(a.id, g * (-2.0 * t * val))] if na.requires_grad else []

        return self._append("tanh_prime", (a.id,), val, vjp)

    def relu(self, a: Variable) -> Variable:
        return self._unary(
            "relu", a,
            lambda x: np.maximum(x, 0.0),
            lambda x, y: (lambda: (x > 0.0).astype(np.float64)),
        )

    def relu_prime(self, a: Variable) -> Variable:
        # Step function; its own derivative is zero almost everywhere and
        # is taken as zero at the kink, so the node carries no gradient.
        na = self._check(a, "relu_prime")
        val = (na.value > 0.0).astype(np.float64)
        return self._append("relu_prime", (a.id,), val, None)

    def leaky_relu(self, a: Variable, alpha: float) -> Variable:
        alpha = float(alpha)
        return self._unary(
            "leaky_relu", a,
            lambda x: np.where(x > 0.0, x, alpha * x),
            lambda x, y: (lambda: np.where(x > 0.0, 1.0, alpha)),
        )

    def leaky_relu_prime(self, a: Variable, alpha: float) -> Variable:
        na = self._check(a, "leaky_relu_prime")
        val = np.where(na.value > 0.0, 1.0, float(alpha))
        return self._append("leaky_relu_prime", (a.id,), val, None)

    # ------------------------------------------------------------------
    # reverse pass

    def backward(self, objective: Variable, wrt: Sequence[Variable]) -> list[np.ndarray]:
        """Gradients of a scalar objective for each requested variable.

        Variables not reachable from the objective get exact zero arrays.
        """
        obj_node = self._check(objective, "backward")
        if obj_node.value.shape != ():
            raise TapeError(f"backward: objective has shape {obj_node.value.shape}, expected scalar")
        for v in wrt:
            self._check(v, "backward")

        adjoint: dict[int, np.ndarray] = {objective.id: np.ones(())}
        for nid in range(objective.id, -1, -1):
            g = adjoint.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            for pid, contrib in node.vjp(g):
                prev = adjoint.get(pid)
                adjoint[pid] = contrib if prev is None else prev + contrib

        out = []
        for v in wrt:
            g = adjoint.get(v.id)
            if g is None:
                g = np.zeros(self._nodes[v.id].value.shape)
            out.append(np.asarray(g, dtype=np.float64))
        return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a broadcast adjoint back to the operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()) if shape == () else np.broadcast_to(g, shape).copy()


def grad_check(
    f: Callable[[Tape, Variable], Variable],
    point,
    h: float = 1e-5,
) -> float:
    """Max relative gap between tape gradients and central differences.

    ``f`` must build a scalar objective from a single tape variable.  The
    reported discrepancy is max over coordinates of
    ``|analytic - central| / max(1, |analytic|)``; callers assert against
    their own tolerance.
    """
    point = _as_array(point)
    tape = Tape()
    x = tape.param(point)
    (analytic,) = tape.backward(f(tape, x), [x])

    def value_at(q: np.ndarray) -> float:
        t = Tape()
        return float(f(t, t.param(q)).value)

    fd = np.empty_like(point)
    flat = point.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        hi = value_at((flat + bump).reshape(point.shape))
        lo = value_at((flat - bump).reshape(point.shape))
        fd.ravel()[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom)) if flat.size else 0.0
