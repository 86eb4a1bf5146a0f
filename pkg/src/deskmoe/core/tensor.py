"""Tensor container and the recording tape used for reverse-mode autodiff.

A ``Tape`` is opened as a context manager. While it is active, every op whose
inputs require gradients appends a node ``(output, inputs, backward_fn)``.
``Tape.backward`` walks the nodes in exact reverse recording order, so the
recording order is the topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NumericError

_state = threading.local()


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.tapes = []
        _state.check_finite = False
    return _state


def default_dtype() -> np.dtype:
    return _tls().dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created in.

    float32 is the training default; float64 is used for gradient checks.
    """
    st = _tls()
    old = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def finite_checks(enabled: bool = True) -> Iterator[None]:
    """Verify every op output is finite (slow; debugging aid)."""
    st = _tls()
    old = st.check_finite
    st.check_finite = enabled
    try:
        yield
    finally:
        st.check_finite = old


class Tensor:
    """Dense row-major array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            target = np.dtype(dtype)
        elif isinstance(data, np.ndarray) and arr.dtype.kind == "f":
            target = arr.dtype
        else:
            target = default_dtype()
        if arr.dtype != target or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=target)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Confined to one thread; distinct tapes may run in parallel on different
    threads because the active-tape stack is thread-local.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _tls().tapes
        if not tapes or tapes[-1] is not self:
            raise RuntimeError("tape stack corrupted; tapes must nest")
        tapes.pop()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

        Intermediate gradients are released as soon as their node has been
        processed; leaves keep theirs (summed over all contributions).
        """
        if loss.size != 1 and grad is None:
            raise ValueError(f"backward needs an explicit seed gradient for shape {loss.shape}")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        produced = {id(out) for out, _, _ in self.nodes}
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(f"backward produced grad {gi.shape} for input {t.shape}")
                if gi.dtype != t.dtype:
                    gi = gi.astype(t.dtype)
                if t.grad is None:
                    # leaves own their grad buffer (optimizers scale it in place)
                    t.grad = gi if id(t) in produced else np.array(gi, copy=True)
                else:
                    t.grad = t.grad + gi
            if out is not loss:
                out.grad = None
        self.nodes.clear()


def active_tape() -> Tape | None:
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, name: str = "") -> Tensor:
    """Wrap an op result; register it on the active tape if any input needs grad."""
    st = _tls()
    if st.check_finite and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output from {name or 'op'}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    needs = any(t.requires_grad for t in inputs)
    tape = st.tapes[-1] if st.tapes else None
    out.requires_grad = bool(needs and tape is not None)
    if out.requires_grad:
        tape.nodes.append((out, tuple(inputs), backward))
    return out


def no_grad_copy(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), dtype=t.dtype)
