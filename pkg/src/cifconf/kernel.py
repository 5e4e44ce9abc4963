"""Dense-matrix compute kernel with reverse-mode differentiation.

Every matrix in the package is a 2-D, row-major (C order) float64 numpy
array wrapped in a :class:`Tensor`.  Operations build an explicit graph
of backward closures as they run; :func:`backward` walks that graph once
in reverse topological order.  Gradients accumulate additively into leaf
tensors (parameters), so repeated backward calls without zeroing sum up,
which is what the per-utterance training loop relies on.

Randomness comes exclusively from :class:`Rng`, a thin wrapper around the
Philox-4x64-10 counter-based generator: the stream is a pure function of
the (seed, stream) key pair and is identical on every platform, so any
run is reproducible from its seed alone.

Graph construction and backward are single-threaded per training step.
A tensor's values are treated as immutable once an operation has
produced them, so read-only sharing across threads (e.g. concurrent
evaluation forwards over shared parameters) is safe.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ShapeMismatch, VocabError


def _as_matrix(data) -> np.ndarray:
    out = np.asarray(data, dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1, 1)
    elif out.ndim == 1:
        out = out.reshape(1, -1)
    elif out.ndim != 2:
        raise ShapeMismatch(f"tensors are 2-D matrices, got ndim={out.ndim}")
    return np.ascontiguousarray(out)


class Tensor:
    """A 2-D float64 matrix plus its place in the backward graph.

    Leaf tensors (parameters, constants) have no backward closure; their
    ``grad`` buffer survives across backward passes and accumulates.
    Interior nodes are re-zeroed at the start of each backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all shape checks live in the op functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Copy on first touch: pushed arrays may be shared between parents,
    # and later accumulation is in place.
    if t.requires_grad:
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``loss`` must be 1x1.  Interior-node gradients are transient; leaf
    gradients accumulate additively across calls.
    """
    if loss.data.shape != (1, 1):
        raise ContractViolation(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in topo:
        if node._backward is not None:
            node.grad = None
    if loss._backward is None:
        _accum(loss, np.ones((1, 1)))
        return
    loss.grad = np.ones((1, 1))

    # Reverse topological order guarantees a node's gradient is complete
    # (non-None) before its backward closure runs.
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape} (inner dims differ)")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    out = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        _accum(a, g * c)

    return _node(out, (a,), bwd)


def shift(a: Tensor, c: float) -> Tensor:
    out = a.data + float(c)

    def bwd(g):
        _accum(a, g)

    return _node(out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.T)

    def bwd(g):
        _accum(a, g.T)

    return _node(out, (a,), bwd)


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: ``b`` is 1 x cols, added to every row of ``m``."""
    if b.rows != 1 or b.cols != m.cols:
        raise ShapeMismatch(f"add_bias: bias {b.shape} does not broadcast over {m.shape}")
    out = m.data + b.data

    def bwd(g):
        _accum(m, g)
        _accum(b, g.sum(axis=0, keepdims=True))

    return _node(out, (m, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one node; b is 1 x out broadcast over rows."""
    if x.cols != w.rows:
        raise ShapeMismatch(f"linear: {x.shape} x {w.shape} (inner dims differ)")
    if b.rows != 1 or b.cols != w.cols:
        raise ShapeMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
    out = x.data @ w.data + b.data

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0, keepdims=True))

    return _node(out, (x, w, b), bwd)


def relu(m: Tensor) -> Tensor:
    out = np.maximum(m.data, 0.0)
    mask = m.data > 0.0

    def bwd(g):
        _accum(m, g * mask)

    return _node(out, (m,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form avoids exp overflow for large negative inputs.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(m: Tensor) -> Tensor:
    s = _sigmoid(m.data)

    def bwd(g):
        _accum(m, g * s * (1.0 - s))

    return _node(s, (m,), bwd)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; each row sums to 1."""
    s = _softmax_rows(m.data)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        _accum(m, s * (g - dot))

    return _node(s, (m,), bwd)


def layer_norm(m: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if gain.shape != (1, m.cols) or bias.shape != (1, m.cols):
        raise ShapeMismatch(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {m.shape}"
        )
    mu = m.data.mean(axis=1, keepdims=True)
    var = m.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (m.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def bwd(g):
        d = m.cols
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / d
        _accum(m, term * inv_std)
        _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        _accum(bias, g.sum(axis=0, keepdims=True))

    return _node(out, (m, gain, bias), bwd)


def dropout(m: Tensor, rate: float, rng: "Rng | None" = None, training: bool = False) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate).

    Identity (returns ``m`` unchanged) when not training or rate == 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return m
    if rng is None:
        raise ContractViolation("training-mode dropout needs an Rng")
    keep = (rng.random(m.shape) >= rate) / (1.0 - rate)
    out = m.data * keep

    def bwd(g):
        _accum(m, g * keep)

    return _node(out, (m,), bwd)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` by id; gradient scatter-adds per id."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        bad = idx[(idx < 0) | (idx >= table.rows)][0]
        raise VocabError(f"token id {int(bad)} outside vocabulary of size {table.rows}")
    out = table.data[idx] if idx.size else np.zeros((0, table.cols))

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _node(out, (table,), bwd)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise ShapeMismatch(f"concat_rows: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=0)
    na = a.rows

    def bwd(g):
        _accum(a, g[:na])
        _accum(b, g[na:])

    return _node(out, (a, b), bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeMismatch(f"concat_cols: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    na = a.cols

    def bwd(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _node(out, (a, b), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop].copy()

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _node(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.data.sum()]])

    def bwd(g):
        _accum(a, np.full_like(a.data, g[0, 0]))

    return _node(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array([[a.data.mean()]])

    def bwd(g):
        _accum(a, np.full_like(a.data, g[0, 0] / n))

    return _node(out, (a,), bwd)


def abs_all(a: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None):
    """Single-head attention: softmax(q k^T / sqrt(d_k) + mask) v.

    Returns (output, weights); both stay in the graph.  ``mask`` is an
    additive q.rows x k.rows matrix (use -inf-like values to block).
    """
    if q.cols != k.cols:
        raise ShapeMismatch(f"attention: q {q.shape} vs k {k.shape} (key dims differ)")
    if k.rows != v.rows:
        raise ShapeMismatch(f"attention: k {k.shape} vs v {v.shape} (row counts differ)")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.cols))
    if mask is not None:
        if mask.shape != (q.rows, k.rows):
            raise ShapeMismatch(
                f"attention mask {mask.shape} vs expected {(q.rows, k.rows)}"
            )
        scores = add(scores, mask)
    weights = softmax_rows(scores)
    return matmul(weights, v), weights


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Fused multi-head attention over column-sliced heads.

    q is N x d, k/v are M x d with d divisible by n_heads.  One graph
    node covers all heads; the backward is the analytic form.
    """
    n, d = q.shape
    m = k.rows
    if k.cols != d or v.cols != d:
        raise ShapeMismatch(f"mha: q {q.shape}, k {k.shape}, v {v.shape} must share width")
    if k.rows != v.rows:
        raise ShapeMismatch(f"mha: k {k.shape} vs v {v.shape} (row counts differ)")
    if d % n_heads:
        raise ShapeMismatch(f"mha: width {d} not divisible by {n_heads} heads")
    if n == 0 or m == 0:
        def bwd_empty(g):
            _accum(q, np.zeros_like(q.data))
            _accum(k, np.zeros_like(k.data))
            _accum(v, np.zeros_like(v.data))

        return _node(np.zeros((n, d)), (q, k, v), bwd_empty)
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)

    qh = q.data.reshape(n, n_heads, dh)
    kh = k.data.reshape(m, n_heads, dh)
    vh = v.data.reshape(m, n_heads, dh)
    scores = np.einsum("nhd,mhd->hnm", qh, kh) * inv
    scores -= scores.max(axis=2, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("hnm,mhd->nhd", w, vh).reshape(n, d)

    def bwd(g):
        go = g.reshape(n, n_heads, dh)
        gw = np.einsum("nhd,mhd->hnm", go, vh)
        gs = w * (gw - (w * gw).sum(axis=2, keepdims=True))
        _accum(q, (np.einsum("hnm,mhd->nhd", gs, kh) * inv).reshape(n, d))
        _accum(k, (np.einsum("hnm,nhd->mhd", gs, qh) * inv).reshape(m, d))
        _accum(v, np.einsum("hnm,nhd->mhd", w, go).reshape(m, d))

    return _node(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = logits.rows
    if idx.size != n:
        raise ContractViolation(f"cross_entropy: {n} rows vs {idx.size} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.cols):
        raise VocabError(f"target id outside logit width {logits.cols}")
    x = logits.data
    mx = x.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=1))
    nll = lse - x[np.arange(n), idx]
    out = np.array([[nll.mean()]])

    def bwd(g):
        p = _softmax_rows(x)
        p[np.arange(n), idx] -= 1.0
        _accum(logits, g[0, 0] * p / n)

    return _node(out, (logits,), bwd)


BCE_CLAMP = 1e-7


def binary_cross_entropy(scores: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean BCE of an N x 1 score column against 0/1 labels.

    Scores are clamped to [1e-7, 1 - 1e-7]; gradients vanish outside
    the clamp range.
    """
    c = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if scores.shape != c.shape:
        raise ContractViolation(f"bce: scores {scores.shape} vs labels {c.shape}")
    if not np.isin(c, (0.0, 1.0)).all():
        raise ContractViolation("bce labels must be 0 or 1")
    n = c.shape[0]
    p = np.clip(scores.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    out = np.array([[-np.mean(c * np.log(p) + (1.0 - c) * np.log1p(-p))]])
    inside = (scores.data > BCE_CLAMP) & (scores.data < 1.0 - BCE_CLAMP)

    def bwd(g):
        _accum(scores, g[0, 0] * inside * (p - c) / (n * p * (1.0 - p)))

    return _node(out, (scores,), bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second-moment buffers per parameter plus a shared step count."""

    def __init__(self):
        self.step = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def moments(self, p: Tensor) -> tuple[np.ndarray, np.ndarray]:
        key = id(p)
        if key not in self._m:
            self._m[key] = np.zeros_like(p.data)
            self._v[key] = np.zeros_like(p.data)
        return self._m[key], self._v[key]


def adam_step(
    params: Iterable[Tensor],
    grads: Iterable[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; the lr schedule is the caller's."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p, g in zip(params, grads):
        if g is None:
            continue
        m, v = state.moments(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic random stream keyed by (seed, stream).

    Backed by numpy's Philox-4x64-10 counter-based bit generator with
    key = [seed, stream]; the output sequence is a pure function of the
    key and is bit-identical across platforms and numpy builds that
    implement Philox (stable since numpy 1.17).  Substreams come from
    :meth:`child`, never from sharing draw order.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "Rng":
        """Independent stream under the same seed; cheap and collision-free
        as long as callers use distinct stream ids."""
        return Rng(self.seed, stream)

    def random(self, shape=None):
        """Uniform [0, 1); a float when shape is None, else an array."""
        out = self._gen.random(shape)
        return float(out) if shape is None else out

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * sigma

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform ints in [low, high); scalar when size is None."""
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def u64(self) -> int:
        return int(self._gen.integers(0, 2**64, dtype=np.uint64))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Standard sin/cos position table, rows 0..n-1, width d (d even)."""
    pos = np.arange(n, dtype=np.float64).reshape(-1, 1)
    div = np.exp(np.arange(0, d, 2, dtype=np.float64) * (-math.log(10000.0) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * div)
    out[:, 1::2] = np.cos(pos * div)
    return out
