"""Dense float tensors with reverse-mode differentiation.

Only the primitives the transformer needs. Every op records a backward
closure on the output node; `backward(root)` runs them in reverse
topological order and accumulates gradients additively across fan-out.
The graph is rebuilt per training step; nothing persists between steps.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np

_node_ids = itertools.count()


class DiffTensor:
    """A dense array plus a gradient slot and its place in the graph.

    `grad` is lazily allocated on first accumulation and always matches
    `values` in shape and dtype. Leaves have no parents.
    """

    __slots__ = ("values", "grad", "node_id", "_parents", "_backward")

    def __init__(self, values, parents=(), backward=None):
        self.values = np.asarray(values)
        self.grad = None
        self.node_id = next(_node_ids)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"DiffTensor(shape={self.values.shape}, node_id={self.node_id})"

    # Small ergonomic sugar; the real op set lives at module level.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(values) -> DiffTensor:
    """Wrap an array as a graph leaf (no parents, no backward)."""
    return DiffTensor(np.asarray(values))


def _accum(t: DiffTensor, g: np.ndarray, own: bool = False):
    """Add g into t.grad; `own=True` means g is fresh and may be aliased."""
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape` by summing extra axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """A named, seeded random stream.

    The draw sequence depends only on (seed, stream_label), never on what
    other streams were created or consumed elsewhere.
    """

    seed: int
    stream_label: str

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed & (2**63 - 1), _label_key(self.stream_label)])
        )

    def child(self, suffix: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_label}/{suffix}")

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self.generator().normal(0.0, std, size=shape)
        return out.astype(dtype, copy=False)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self.generator().integers(low, high, size=size)


def init_normal(shape, variance: float, rng: RngStream, dtype=np.float64) -> DiffTensor:
    """Leaf tensor with i.i.d. N(0, variance) entries, deterministic per stream."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    return leaf(rng.normal(shape, std=float(np.sqrt(variance)), dtype=dtype))


# ---------------------------------------------------------------------------
# arithmetic ops
# ---------------------------------------------------------------------------


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out_vals = a.values + b.values

    def bwd(g):
        _accum(a, _unbroadcast(g, a.values.shape))
        _accum(b, _unbroadcast(g, b.values.shape))

    return DiffTensor(out_vals, (a, b), bwd)


def add_const(a: DiffTensor, c: np.ndarray) -> DiffTensor:
    """Add a non-differentiable constant (e.g. an attention mask)."""
    out_vals = a.values + c

    def bwd(g):
        _accum(a, _unbroadcast(g, a.values.shape))

    return DiffTensor(out_vals, (a,), bwd)


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out_vals = a.values * b.values

    def bwd(g):
        _accum(a, _unbroadcast(g * b.values, a.values.shape), own=True)
        _accum(b, _unbroadcast(g * a.values, b.values.shape), own=True)

    return DiffTensor(out_vals, (a, b), bwd)


def scale(a: DiffTensor, s: float) -> DiffTensor:
    out_vals = a.values * s

    def bwd(g):
        _accum(a, g * s, own=True)

    return DiffTensor(out_vals, (a,), bwd)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """np.matmul semantics; backward is dA = g @ B^T, dB = A^T @ g."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ValueError(
            f"matmul inner extents disagree: {a.values.shape} x {b.values.shape}"
        )
    out_vals = np.matmul(a.values, b.values)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.values.shape), own=True)
        _accum(b, _unbroadcast(gb, b.values.shape), own=True)

    return DiffTensor(out_vals, (a, b), bwd)


def relu(x: DiffTensor) -> DiffTensor:
    out_vals = np.maximum(x.values, 0.0)

    def bwd(g):
        _accum(x, g * (x.values > 0), own=True)

    return DiffTensor(out_vals, (x,), bwd)


def softmax(x: DiffTensor, axis: int = -1) -> DiffTensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    if x.values.size == 0:
        raise ValueError("softmax of empty input")
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * p, axis=axis, keepdims=True)
        _accum(x, p * (g - inner), own=True)

    return DiffTensor(p, (x,), bwd)


def logsumexp(x: DiffTensor, axis: int = -1) -> DiffTensor:
    m = np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(x.values - m)
    s = np.sum(e, axis=axis)
    out_vals = np.squeeze(m, axis=axis) + np.log(s)

    def bwd(g):
        p = e / np.expand_dims(s, axis)
        _accum(x, np.expand_dims(g, axis) * p, own=True)

    return DiffTensor(out_vals, (x,), bwd)


def square(x: DiffTensor) -> DiffTensor:
    out_vals = x.values * x.values

    def bwd(g):
        _accum(x, 2.0 * x.values * g, own=True)

    return DiffTensor(out_vals, (x,), bwd)


def tsum(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    out_vals = np.sum(x.values, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.values.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.values.shape))

    return DiffTensor(out_vals, (x,), bwd)


def tmean(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    n = x.values.size if axis is None else x.values.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: DiffTensor, shape) -> DiffTensor:
    out_vals = x.values.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.values.shape))

    return DiffTensor(out_vals, (x,), bwd)


def transpose(x: DiffTensor, axes) -> DiffTensor:
    out_vals = np.transpose(x.values, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return DiffTensor(out_vals, (x,), bwd)


# ---------------------------------------------------------------------------
# indexing ops
# ---------------------------------------------------------------------------


def embedding(weight: DiffTensor, idx: np.ndarray) -> DiffTensor:
    """Row lookup weight[idx]; repeated indices accumulate in backward."""
    out_vals = weight.values[idx]

    def bwd(g):
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.values)
        np.add.at(weight.grad, idx.reshape(-1), g.reshape(-1, weight.values.shape[-1]))

    return DiffTensor(out_vals, (weight,), bwd)


def gather_rows(x: DiffTensor, idx: np.ndarray, unique: bool = False) -> DiffTensor:
    """Select rows of a 2-d tensor. `unique=True` skips the duplicate-safe path."""
    out_vals = x.values[idx]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        if unique:
            x.grad[idx] += g
        else:
            np.add.at(x.grad, idx, g)

    return DiffTensor(out_vals, (x,), bwd)


def combine_rows(n_rows: int, contributions) -> DiffTensor:
    """Scatter-add row blocks into an (n_rows, d) output.

    `contributions` is a list of (row_idx, DiffTensor) pairs; each row_idx
    must be duplicate-free within its pair (one row per dispatched token).
    Summation order is the list order, so results are deterministic.
    """
    if not contributions:
        raise ValueError("combine_rows needs at least one contribution")
    d = contributions[0][1].values.shape[-1]
    dtype = contributions[0][1].values.dtype
    out_vals = np.zeros((n_rows, d), dtype=dtype)
    for idx, t in contributions:
        out_vals[idx] += t.values

    def bwd(g):
        for idx, t in contributions:
            _accum(t, g[idx], own=True)

    return DiffTensor(out_vals, tuple(t for _, t in contributions), bwd)


def take_along(x: DiffTensor, idx: np.ndarray) -> DiffTensor:
    """Per-row gather on the last axis of a 2-d tensor (idx unique per row)."""
    out_vals = np.take_along_axis(x.values, idx, axis=-1)
    rows = np.arange(x.values.shape[0])[:, None]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        x.grad[rows, idx] += g

    return DiffTensor(out_vals, (x,), bwd)


def gather_pairs(x: DiffTensor, rows: np.ndarray, cols: np.ndarray) -> DiffTensor:
    """Pick x[rows[i], cols[i]] as a vector; (row, col) pairs must be unique."""
    out_vals = x.values[rows, cols]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        x.grad[rows, cols] += g

    return DiffTensor(out_vals, (x,), bwd)


def select_index(x: DiffTensor, i: int) -> DiffTensor:
    """x[i] along axis 0 (e.g. one expert's matrix out of a stacked weight)."""
    out_vals = x.values[i]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        x.grad[i] += g

    return DiffTensor(out_vals, (x,), bwd)


# ---------------------------------------------------------------------------
# fused layers
# ---------------------------------------------------------------------------


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """LayerNorm over the last axis with learnable gain and bias."""
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_vals = xhat * gain.values + bias.values

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead), own=True)
        _accum(bias, g.sum(axis=lead), own=True)
        gx = g * gain.values
        gsum = gx.mean(axis=-1, keepdims=True)
        gdot = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gx - gsum - xhat * gdot), own=True)

    return DiffTensor(out_vals, (x, gain, bias), bwd)


def cross_entropy_logits(logits: DiffTensor, targets: np.ndarray) -> DiffTensor:
    """Mean negative log-softmax of target classes; logits is (batch, vocab).

    Backward is the closed form (softmax - onehot) / batch.
    """
    if logits.values.ndim != 2:
        raise ValueError("cross_entropy_logits expects 2-d logits (batch, vocab)")
    targets = np.asarray(targets).reshape(-1)
    batch, vocab = logits.values.shape
    if targets.shape[0] != batch:
        raise ValueError("targets length must match logits batch")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError(f"target out of range [0, {vocab})")
    m = np.max(logits.values, axis=-1, keepdims=True)
    shifted = logits.values - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1)) + m[:, 0]
    rows = np.arange(batch)
    loss = float(np.mean(lse - logits.values[rows, targets]))

    def bwd(g):
        p = np.exp(logits.values - lse[:, None])
        p[rows, targets] -= 1.0
        p *= g / batch
        _accum(logits, p, own=True)

    return DiffTensor(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# non-differentiable helpers
# ---------------------------------------------------------------------------


def top_k(logits, k: int):
    """The k largest entries of a vector as (index, value) pairs.

    Sorted by descending value; ties broken toward the lowest index.
    """
    vals = logits.values if isinstance(logits, DiffTensor) else np.asarray(logits)
    vals = vals.reshape(-1)
    if not 1 <= k <= vals.shape[0]:
        raise ValueError(f"k={k} out of range for vector of length {vals.shape[0]}")
    order = np.argsort(-vals, kind="stable")[:k]
    return [(int(i), float(vals[i])) for i in order]


def top_k_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices of a 2-d array, same ordering rules as top_k."""
    if not 1 <= k <= values.shape[-1]:
        raise ValueError(f"k={k} out of range for {values.shape[-1]} columns")
    return np.argsort(-values, axis=-1, kind="stable")[:, :k]


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(root: DiffTensor):
    """Populate grads of every tensor reachable from a scalar root."""
    if root.values.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.values.shape}")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.values)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
