"""Dense float64 matrix kernel with a reverse-mode differentiation tape.

Everything downstream (embedding, attention, elimination, head) is built from
the operations here. Shapes are checked strictly: the only broadcast anywhere
is the row-vector affine inside :func:`layernorm` and :func:`add_bias`.

Tracing is opt-in: inside a ``with trace() as tape`` block every operation
records its backward rule on the tape; outside, operations are plain numpy.
MAC accounting works the same way through ``count_macs()`` / ``mac_scope()``.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, UsageError

_LOCAL = threading.local()


def _tapes() -> list["Tape"]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def _counters() -> list["MacCounter"]:
    if not hasattr(_LOCAL, "counters"):
        _LOCAL.counters = []
    return _LOCAL.counters


def _active_tape() -> "Tape | None":
    stack = _tapes()
    return stack[-1] if stack else None


def _active_counter() -> "MacCounter | None":
    stack = _counters()
    return stack[-1] if stack else None


class TokenMatrix:
    """2D float64 array; rows are tokens, columns are channels."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"TokenMatrix must be 2D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ContractError("TokenMatrix entries must be finite")
        self.data = arr

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "TokenMatrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "TokenMatrix":
        return cls(np.eye(n))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def copy(self) -> "TokenMatrix":
        return TokenMatrix(self.data.copy())

    def __repr__(self) -> str:
        return f"TokenMatrix({self.rows}x{self.cols})"


class Tape:
    """Reverse-mode tape. Nodes are appended in evaluation order, which is a
    topological order of the compute graph; backward replays them reversed.
    Gradients accumulate additively, so a value consumed k times receives k
    contributions."""

    def __init__(self):
        # (output, parents, backward_fn); strong refs keep id() keys stable
        self._nodes: list[tuple[TokenMatrix, tuple[TokenMatrix, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: TokenMatrix, parents: Sequence[TokenMatrix],
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self._nodes.append((out, tuple(parents), backward_fn))

    def backward(self, output: TokenMatrix) -> None:
        if output.shape != (1, 1):
            raise UsageError(f"backward requires a 1x1 scalar output, got {output.shape}")
        self._grads = {id(output): np.ones((1, 1))}
        for out, parents, backward_fn in reversed(self._nodes):
            g = self._grads.get(id(out))
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None:
                    continue
                acc = self._grads.get(id(parent))
                self._grads[id(parent)] = pg if acc is None else acc + pg

    def grad(self, m: TokenMatrix) -> np.ndarray:
        """Gradient of the last backward() output w.r.t. m (zeros if unused)."""
        g = self._grads.get(id(m))
        return np.zeros(m.shape) if g is None else g


@contextmanager
def trace() -> Iterator[Tape]:
    tape = Tape()
    _tapes().append(tape)
    try:
        yield tape
    finally:
        _tapes().pop()


class MacCounter:
    """Pass-local multiply-accumulate counter with nested scope labels."""

    def __init__(self):
        self.counts: dict[str, int] = {}
        self._scopes: list[str] = []

    @contextmanager
    def scope(self, label: str) -> Iterator[None]:
        self._scopes.append(label)
        try:
            yield
        finally:
            self._scopes.pop()

    def add(self, macs: int) -> None:
        key = "/".join(self._scopes) if self._scopes else "unscoped"
        self.counts[key] = self.counts.get(key, 0) + macs

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().pop()


@contextmanager
def mac_scope(label: str) -> Iterator[None]:
    counter = _active_counter()
    if counter is None:
        yield
    else:
        with counter.scope(label):
            yield


def _emit(arr: np.ndarray, parents: Sequence[TokenMatrix],
          backward_fn: Callable) -> TokenMatrix:
    out = TokenMatrix(arr)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def matmul(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    counter = _active_counter()
    if counter is not None:
        counter.add(a.rows * a.cols * b.cols)
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(m: TokenMatrix, bias: TokenMatrix) -> TokenMatrix:
    if bias.shape != (1, m.cols):
        raise DimensionError(f"add_bias: bias must be 1x{m.cols}, got {bias.shape}")
    return _emit(m.data + bias.data, (m, bias),
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


def hadamard(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(m: TokenMatrix, s: float) -> TokenMatrix:
    return _emit(m.data * s, (m,), lambda g: (g * s,))


def transpose(m: TokenMatrix) -> TokenMatrix:
    return _emit(m.data.T.copy(), (m,), lambda g: (g.T,))


def concat_rows(parts: Sequence[TokenMatrix]) -> TokenMatrix:
    if not parts:
        raise UsageError("concat_rows: empty part list")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(f"concat_rows: column mismatch {p.cols} vs {cols}")
    splits = np.cumsum([p.rows for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _emit(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def concat_cols(parts: Sequence[TokenMatrix]) -> TokenMatrix:
    if not parts:
        raise UsageError("concat_cols: empty part list")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError(f"concat_cols: row mismatch {p.rows} vs {rows}")
    splits = np.cumsum([p.cols for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _emit(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def slice_block(m: TokenMatrix, r0: int, r1: int, c0: int, c1: int) -> TokenMatrix:
    if not (0 <= r0 <= r1 <= m.rows and 0 <= c0 <= c1 <= m.cols):
        raise DimensionError(f"slice_block: [{r0}:{r1}, {c0}:{c1}] out of {m.shape}")
    shape = m.shape

    def backward(g):
        full = np.zeros(shape)
        full[r0:r1, c0:c1] = g
        return (full,)

    return _emit(m.data[r0:r1, c0:c1].copy(), (m,), backward)


def gather_rows(m: TokenMatrix, indices: Sequence[int]) -> TokenMatrix:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise UsageError("gather_rows: empty index list")
    if idx.min() < 0 or idx.max() >= m.rows:
        raise DimensionError(f"gather_rows: index out of range for {m.rows} rows")
    shape = m.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(m.data[idx].copy(), (m,), backward)


def scatter_rows(m: TokenMatrix, indices: Sequence[int], total_rows: int) -> TokenMatrix:
    """Place row i of m at indices[i] in a zero matrix with total_rows rows."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size != m.rows:
        raise DimensionError(f"scatter_rows: {idx.size} indices for {m.rows} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= total_rows):
        raise DimensionError(f"scatter_rows: index out of range for {total_rows} rows")
    full = np.zeros((total_rows, m.cols))
    full[idx] = m.data
    return _emit(full, (m,), lambda g: (g[idx],))


def softmax_rows(m: TokenMatrix) -> TokenMatrix:
    if m.rows == 0 or m.cols == 0:
        raise UsageError("softmax_rows: empty matrix")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (m,), backward)


def layernorm(m: TokenMatrix, gain: TokenMatrix, bias: TokenMatrix,
              eps: float = 1e-5) -> TokenMatrix:
    if gain.shape != (1, m.cols) or bias.shape != (1, m.cols):
        raise DimensionError(
            f"layernorm: gain/bias must be 1x{m.cols}, got {gain.shape}, {bias.shape}")
    x = m.data
    c = m.cols
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * istd ** 3
        dmu = (-dxhat * istd).sum(axis=1, keepdims=True) + dvar * (-2.0 * xc.mean(axis=1, keepdims=True))
        dx = dxhat * istd + dvar * 2.0 * xc / c + dmu / c
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return (dx, dgain, dbias)

    return _emit(xhat * gd + bias.data, (m, gain, bias), backward)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(m: TokenMatrix) -> TokenMatrix:
    x = m.data
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _emit(0.5 * x * (1.0 + t), (m,), backward)


def sigmoid(m: TokenMatrix) -> TokenMatrix:
    y = 1.0 / (1.0 + np.exp(-m.data))
    return _emit(y, (m,), lambda g: (g * y * (1.0 - y),))


def sum_all(m: TokenMatrix) -> TokenMatrix:
    shape = m.shape
    return _emit(np.array([[m.data.sum()]]), (m,),
                 lambda g: (np.full(shape, g[0, 0]),))


def mean_all(m: TokenMatrix) -> TokenMatrix:
    shape = m.shape
    n = m.rows * m.cols
    return _emit(np.array([[m.data.mean()]]), (m,),
                 lambda g: (np.full(shape, g[0, 0] / n),))
