"""Differentiable operations over :class:`Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` when the input
is a constant). Broadcasting is limited to what the model needs: a 2-D weight
on the right of ``matmul`` and per-row scaling in ``scale_rows``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError, RangeError, ShapeError
from .tensor import Tensor, record


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``.

    Accepts ``a[..., m, k] @ b[k, n]`` (a shared weight) and batched
    ``a[..., m, k] @ b[..., k, n]`` with identical leading dimensions.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        da = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        db = None
        if b.requires_grad:
            if shared:
                db = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                db = np.swapaxes(A, -1, -2) @ g
        return da, db

    return record(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        return g, g

    return record(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return (g * B if a.requires_grad else None), (g * A if b.requires_grad else None)

    return record(A * B, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return record(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        out = np.asarray(x.data.mean(), dtype=x.dtype)

        def backward(g):
            return (np.full(shape, g / n, dtype=g.dtype),)

    else:
        ax = axis % x.data.ndim
        n = shape[ax]
        out = x.data.mean(axis=ax)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return record(out, (x,), backward, "mean")


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    src = x.dtype
    return record(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return record(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "transpose")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = _sigmoid(X)

    def backward(g):
        return (g * s * (1 + X * (1 - s)),)

    return record(X * s, (x,), backward, "silu")


def swiglu(gate: Tensor, up: Tensor) -> Tensor:
    """``silu(gate) * up``."""
    _same_shape(gate, up, "swiglu")
    G, U = gate.data, up.data
    s = _sigmoid(G)
    act = G * s

    def backward(g):
        dg = g * U * s * (1 + G * (1 - s)) if gate.requires_grad else None
        du = g * act if up.requires_grad else None
        return dg, du

    return record(act * U, (gate, up), backward, "swiglu")


def rmsnorm(x: Tensor, weight: Tensor | None, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * weight`` over the last axis."""
    if eps <= 0:
        raise ParameterError(f"rmsnorm eps must be > 0, got {eps}")
    X = x.data
    inv = 1.0 / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + X.dtype.type(eps))
    n = X * inv
    if weight is None:
        out = n
    else:
        if weight.shape != (X.shape[-1],):
            raise ShapeError(f"rmsnorm: weight {weight.shape} does not match last axis of {x.shape}")
        out = n * weight.data

    def backward(g):
        dw = None
        if weight is not None:
            if weight.requires_grad:
                dw = (g * n).reshape(-1, X.shape[-1]).sum(axis=0)
            dn = g * weight.data
        else:
            dn = g
        dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) * inv if x.requires_grad else None
        return (dx,) if weight is None else (dx, dw)

    inputs = (x,) if weight is None else (x, weight)
    return record(out, inputs, backward, "rmsnorm")


def layernorm(x: Tensor, weight: Tensor | None, eps: float) -> Tensor:
    """Mean-centred normalisation over the last axis; non-parametric when ``weight`` is None."""
    if eps <= 0:
        raise ParameterError(f"layernorm eps must be > 0, got {eps}")
    X = x.data
    xc = X - X.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + X.dtype.type(eps))
    n = xc * inv
    out = n if weight is None else n * weight.data

    def backward(g):
        dw = None
        if weight is not None:
            if weight.requires_grad:
                dw = (g * n).reshape(-1, X.shape[-1]).sum(axis=0)
            dn = g * weight.data
        else:
            dn = g
        dx = (dn - dn.mean(axis=-1, keepdims=True) - n * np.mean(dn * n, axis=-1, keepdims=True)) * inv
        return (dx,) if weight is None else (dx, dw)

    inputs = (x,) if weight is None else (x, weight)
    return record(out, inputs, backward, "layernorm")


def rope_tables(positions: np.ndarray, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ShapeError(f"rope needs an even head dimension, got {head_dim}")
    half = head_dim // 2
    freqs = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, positions: np.ndarray, theta: float = 10_000.0) -> Tensor:
    """Rotary position embedding (rotate-half layout) on ``x[..., S, D]``."""
    X = x.data
    S, D = X.shape[-2], X.shape[-1]
    if len(positions) != S:
        raise ShapeError(f"rope: {len(positions)} positions for sequence length {S}")
    cos, sin = rope_tables(positions, D, theta, X.dtype)
    h = D // 2
    x1, x2 = X[..., :h], X[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return record(out, (x,), backward, "rope")


def _softmax_np(X: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(X - X.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    y = _softmax_np(x.data, axis)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record(y, (x,), backward, "softmax")


def causal_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of ``x[..., S, S]`` with keys after the query masked out."""
    X = x.data
    S = X.shape[-1]
    if X.shape[-2] != S:
        raise ShapeError(f"causal_softmax needs square trailing dims, got {x.shape}")
    mask = np.triu(np.ones((S, S), dtype=bool), k=1)
    masked = np.where(mask, -np.inf, X)
    e = np.exp(masked - masked.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return record(y, (x,), backward, "causal_softmax")


def logsumexp(x: Tensor) -> Tensor:
    """Stable log-sum-exp over the last axis."""
    X = x.data
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def backward(g):
        return (g[..., None] * (e / s),)

    return record(out, (x,), backward, "logsumexp")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of ``targets`` under ``logits[N, V]``."""
    X = logits.data
    if X.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    N, V = X.shape
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != N:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {N} rows")
    if N == 0:
        raise ParameterError("cross_entropy over zero rows")
    if t.min() < 0 or t.max() >= V:
        raise RangeError(f"target id out of range [0, {V}): min {t.min()}, max {t.max()}")
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=-1, keepdims=True)
    rows = np.arange(N)
    nll = (np.log(s[:, 0]) + m[:, 0]) - X[rows, t]
    out = np.asarray(nll.mean(), dtype=X.dtype)

    def backward(g):
        p = e / s
        p[rows, t] -= 1
        return (p * (g / N),)

    return record(out, (logits,), backward, "cross_entropy")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[idx]`` along axis 0; the backward pass scatter-adds in index order."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RangeError(f"row index out of range [0, {n})")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return record(x.data[idx], (x,), backward, "gather_rows")


def scatter_add_rows(src: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into ``n_rows`` output rows; accumulation follows ``idx`` order."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add_rows: {idx.shape[0]} indices for {src.shape[0]} rows")
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)
    return record(out, (src,), lambda g: (g[idx],), "scatter_add_rows")


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``x[rows[i], cols[i]]`` for a 2-D ``x``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return record(x.data[rows, cols], (x,), backward, "take_pairs")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x[M, d]`` by ``w[i]``."""
    if w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: weights {w.shape} for rows of {x.shape}")
    X, W = x.data, w.data

    def backward(g):
        dx = g * W[:, None] if x.requires_grad else None
        dw = np.einsum("md,md->m", g, X) if w.requires_grad else None
        return dx, dw

    return record(X * W[:, None], (x, w), backward, "scale_rows")


def segment_matmul(x: Tensor, w: Tensor, offsets: np.ndarray) -> Tensor:
    """Grouped GEMM: rows ``offsets[e]:offsets[e+1]`` of ``x`` multiply ``w[e]``.

    ``x`` is ``[A, d_in]`` with rows already sorted by group, ``w`` is
    ``[E, d_in, d_out]`` and ``offsets`` has ``E + 1`` non-decreasing entries.
    """
    X, Wd = x.data, w.data
    E = Wd.shape[0]
    if Wd.ndim != 3 or X.ndim != 2 or X.shape[1] != Wd.shape[1]:
        raise ShapeError(f"segment_matmul: cannot multiply {x.shape} by groups of {w.shape}")
    if len(offsets) != E + 1 or offsets[0] != 0 or offsets[-1] != X.shape[0]:
        raise ShapeError("segment_matmul: offsets do not partition the rows")
    out = np.empty((X.shape[0], Wd.shape[2]), dtype=X.dtype)
    for e in range(E):
        lo, hi = offsets[e], offsets[e + 1]
        if hi > lo:
            out[lo:hi] = X[lo:hi] @ Wd[e]

    def backward(g):
        dx = np.zeros_like(X) if x.requires_grad else None
        dw = np.zeros_like(Wd) if w.requires_grad else None
        for e in range(E):
            lo, hi = offsets[e], offsets[e + 1]
            if hi == lo:
                continue
            if dx is not None:
                dx[lo:hi] = g[lo:hi] @ Wd[e].T
            if dw is not None:
                dw[e] = X[lo:hi].T @ g[lo:hi]
        return dx, dw

    return record(out, (x, w), backward, "segment_matmul")


def index_expert(w: Tensor, e: int) -> Tensor:
    """Slice ``w[e]`` out of a stacked parameter."""
    shape = w.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[e] = g
        return (out,)

    return record(w.data[e].copy(), (w,), backward, "index_expert")


def topk(x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries along the last axis.

    Ordered by descending value; equal values are ordered by ascending index.
    Not differentiable. Works row-wise on 2-D input.
    """
    X = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = X.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"topk: k={k} outside [1, {n}]")
    order = np.argsort(-X, axis=-1, kind="stable")[..., :k]
    return order, np.take_along_axis(X, order, axis=-1)


def truncated_normal(shape, std: float, cutoff: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) draws; any draw with ``|v| > cutoff`` is redrawn until it fits."""
    if cutoff <= 0:
        raise ParameterError(f"truncated normal cutoff must be > 0, got {cutoff}")
    if std <= 0:
        raise ParameterError(f"truncated normal std must be > 0, got {std}")
    n = int(np.prod(shape, dtype=np.int64))
    out = rng.normal(0.0, std, size=n)
    bad = np.flatnonzero(np.abs(out) > cutoff)
    while bad.size:
        out[bad] = rng.normal(0.0, std, size=bad.size)
        bad = bad[np.abs(out[bad]) > cutoff]
    return out.reshape(shape).astype(dtype)
