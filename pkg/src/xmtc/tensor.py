"""Dense float64 kernels and a reverse-mode gradient tape.

A matrix is a C-contiguous ``numpy.ndarray`` of dtype float64. Multi-head
attention keeps heads stacked along a leading axis, shape ``(h, n, d_k)``,
so the batched kernels below accept any array whose last two axes are the
matrix axes.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError

NEG_INF = -np.inf


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


# --------------------------------------------------------------------------
# Pure kernels
# --------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def row_softmax(s: np.ndarray) -> np.ndarray:
    """Softmax over the last axis; ``-inf`` entries map to exactly 0."""
    m = np.max(s, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("softmax row has no finite entry")
    e = np.exp(s - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def causal_mask_matrix(n: int) -> np.ndarray:
    """Boolean ``n x n`` matrix, True where column > row (future position)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def apply_causal_mask(s: np.ndarray) -> np.ndarray:
    """Set entries strictly above the diagonal to ``-inf``.

    Position ``i`` keeps scores for positions ``<= i`` only.
    """
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise ShapeError(f"causal mask needs square score matrices, got {s.shape}")
    out = np.array(s, dtype=np.float64, copy=True)
    out[..., causal_mask_matrix(s.shape[-1])] = NEG_INF
    return out


def tanh_map(m: np.ndarray) -> np.ndarray:
    return np.tanh(m)


def split_heads(m: np.ndarray, h: int) -> list[np.ndarray]:
    """Split ``len x d_model`` into ``h`` column blocks of width ``d_model // h``."""
    m = as_matrix(m)
    if h <= 0 or m.shape[1] % h:
        raise ShapeError(f"d_model={m.shape[1]} is not divisible by h={h}")
    d_k = m.shape[1] // h
    return [m[:, i * d_k:(i + 1) * d_k].copy() for i in range(h)]


def concat_heads(heads: Sequence[np.ndarray]) -> np.ndarray:
    if not heads:
        raise ShapeError("concat_heads needs at least one head")
    rows = {hd.shape[0] for hd in heads}
    if len(rows) != 1:
        raise ShapeError(f"heads disagree on row count: {sorted(rows)}")
    return np.concatenate([as_matrix(hd) for hd in heads], axis=1)


def stack_heads(m: np.ndarray, h: int) -> np.ndarray:
    """``(n, d_model) -> (h, n, d_k)``; the batched form of :func:`split_heads`."""
    n, d = m.shape
    if h <= 0 or d % h:
        raise ShapeError(f"d_model={d} is not divisible by h={h}")
    return np.ascontiguousarray(m.reshape(n, h, d // h).transpose(1, 0, 2))


def unstack_heads(x: np.ndarray) -> np.ndarray:
    """``(h, n, d_k) -> (n, h * d_k)``; inverse of :func:`stack_heads`."""
    h, n, d_k = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * d_k))


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------


class Node:
    """One value on the tape.

    ``parents`` and ``vjp`` describe how the value was produced; ``vjp``
    maps the upstream gradient to one gradient per parent.
    """

    __slots__ = ("value", "parents", "vjp", "name", "index", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, name=None, requires_grad=False):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name
        self.index = -1
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or "node"
        return f"<{label} #{self.index} {self.value.shape}>"


class GradTape:
    """Records primitive applications in forward order.

    Leaves come from :meth:`param` (differentiable) or :meth:`constant`.
    Every other method applies one primitive, caches what its backward
    rule needs and returns the output node.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def _op(self, value, parents, vjp, name):
        needs = any(p.requires_grad for p in parents)
        return self._push(Node(value, parents, vjp if needs else None, name, needs))

    # leaves ---------------------------------------------------------------

    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            return self.params[name]
        node = self._push(Node(np.asarray(value, dtype=np.float64), name=name, requires_grad=True))
        self.params[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        return self._push(Node(np.asarray(value, dtype=np.float64), name=name))

    # primitives -----------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = matmul(av, bv)

        def vjp(g):
            da = np.matmul(g, np.swapaxes(bv, -1, -2))
            db = np.matmul(np.swapaxes(av, -1, -2), g)
            return _unbroadcast(da, av.shape), _unbroadcast(db, bv.shape)

        return self._op(out, (a, b), vjp, "matmul")

    def matmul_nt(self, a: Node, b: Node) -> Node:
        """``a @ b^T`` over the last two axes."""
        av, bv = a.value, b.value
        if av.shape[-1] != bv.shape[-1]:
            raise ShapeError(f"matmul_nt shape mismatch: {av.shape} x {bv.shape}^T")
        out = np.matmul(av, np.swapaxes(bv, -1, -2))

        def vjp(g):
            return np.matmul(g, bv), np.matmul(np.swapaxes(g, -1, -2), av)

        return self._op(out, (a, b), vjp, "matmul_nt")

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
        return self._op(a.value + b.value, (a, b), lambda g: (g, g), "add")

    def scale(self, a: Node, c: float) -> Node:
        return self._op(a.value * c, (a,), lambda g: (g * c,), "scale")

    def causal_mask(self, a: Node) -> Node:
        out = apply_causal_mask(a.value)
        keep = ~causal_mask_matrix(a.shape[-1])
        return self._op(out, (a,), lambda g: (g * keep,), "causal_mask")

    def softmax(self, a: Node) -> Node:
        p = row_softmax(a.value)

        def vjp(g):
            return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

        return self._op(p, (a,), vjp, "softmax")

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def mean_rows(self, a: Node) -> Node:
        n = a.shape[0]
        out = np.mean(a.value, axis=0, keepdims=True)
        return self._op(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean_rows")

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        out = np.concatenate([p.value for p in parts], axis=0)
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def vjp(g):
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._op(out, tuple(parts), vjp, "concat_rows")

    def split_heads(self, a: Node, h: int) -> Node:
        out = stack_heads(a.value, h)
        return self._op(out, (a,), lambda g: (unstack_heads(g),), "split_heads")

    def concat_heads(self, a: Node) -> Node:
        h = a.shape[0]
        out = unstack_heads(a.value)
        return self._op(out, (a,), lambda g: (stack_heads(g, h),), "concat_heads")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def backward(tape: GradTape, output: Node, upstream=None) -> dict[str, np.ndarray]:
    """Reverse sweep from ``output``; returns gradients for every param leaf.

    Params that the output does not depend on get an all-zero gradient.
    """
    if upstream is None:
        if output.value.size != 1:
            raise ShapeError("upstream gradient required for non-scalar output")
        upstream = np.ones_like(output.value)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != output.value.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {output.value.shape}")

    grads: dict[int, np.ndarray] = {output.index: upstream}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.vjp is None:
            if g is not None:
                grads[node.index] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    return {
        name: np.array(grads.get(node.index, np.zeros_like(node.value)), dtype=np.float64)
        for name, node in tape.params.items()
    }


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


# --------------------------------------------------------------------------
# Binary matrix dump: <u64 rows><u64 cols> then row-major <f8 data
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def dump_matrix(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    return _HEADER.pack(*m.shape) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def load_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix at ``offset``; returns it and the offset just past it."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated matrix header")
    rows, cols = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    nbytes = rows * cols * 8
    if len(buf) - offset < nbytes:
        raise ValueError(f"truncated matrix body: need {nbytes} bytes")
    m = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset).astype(np.float64).reshape(rows, cols)
    return m, offset + nbytes
