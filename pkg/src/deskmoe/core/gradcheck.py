"""Central finite-difference gradient checking.

Relative error of one tensor is ``max|analytic - numeric| / max(max|numeric|,
max|analytic|)``, i.e. the worst absolute deviation measured against the
tensor's gradient scale. Per-element ratios are meaningless for entries whose
true gradient is ~0.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(
    f: Callable[[], Tensor],
    t: Tensor,
    h: float = 1e-4,
    indices: np.ndarray | None = None,
    guard: Callable[[], object] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. ``t`` (perturbed in place).

    Returns ``(grad, valid)``; ``valid`` is False where ``guard()`` changed
    between the two probes (a discrete branch such as top-k flipped).
    """
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.zeros(flat.size, dtype=np.float64)
    valid = np.ones(flat.size, dtype=bool)
    base = guard() if guard is not None else None
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        gp = guard() if guard is not None else None
        flat[i] = orig - h
        fm = float(f().data)
        gm = guard() if guard is not None else None
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
        if guard is not None and not (_same(gp, base) and _same(gm, base)):
            valid[i] = False
    return out.reshape(t.shape), valid.reshape(t.shape)


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return bool(np.array_equal(a, b))


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask: np.ndarray | None = None) -> float:
    a, n = analytic, numeric
    if mask is not None:
        a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(n).max(), np.abs(a).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def gradcheck(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    guard: Callable[[], object] | None = None,
) -> list[float]:
    """Relative error of the tape gradient vs finite differences, one per tensor.

    ``max_entries`` samples that many entries per tensor (all when None).
    """
    analytic = analytic_grads(f, tensors)
    rng = np.random.default_rng(seed)
    errs = []
    for t, a in zip(tensors, analytic):
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        n, valid = numeric_grad(f, t, h=h, indices=idx, guard=guard)
        mask = valid.copy()
        if idx is not None:
            sel = np.zeros(t.size, dtype=bool)
            sel[idx] = True
            mask &= sel.reshape(t.shape)
        errs.append(relative_error(a, n, mask))
    return errs
