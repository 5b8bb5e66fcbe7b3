"""Dense numeric substrate: immutable row-major matrices, fixed-order matmul,
masked row softmax, a portable seeded RNG and allocation / flop meters.

Every product goes through :func:`matmul` / :func:`matmul_array`, a compiled
loop that accumulates over the inner dimension in ascending order (loop order
i, k, j) with separate multiply and add roundings. Results are bit-identical
to a naive triple loop and independent of the BLAS build or thread count.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

NEG_INF = -math.inf

_MASK64 = (1 << 64) - 1
_local = threading.local()


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# instrumentation


class AllocMeter:
    """Counts simultaneously live :class:`Matrix` elements.

    The meter is attached to the current thread only (see :func:`metered`),
    so concurrent workers never pollute each other's counts.
    """

    def __init__(self):
        self.live_elements = 0
        self.high_water = 0

    def reset(self):
        self.live_elements = 0
        self.high_water = 0

    def alloc(self, n: int):
        self.live_elements += n
        if self.live_elements > self.high_water:
            self.high_water = self.live_elements

    def free(self, n: int):
        self.live_elements -= n


class FlopCounter:
    """Counts multiply-adds performed by matmul and the gather kernels."""

    def __init__(self):
        self.madds = 0

    def add(self, n: int):
        self.madds += n


@contextmanager
def metered(meter: AllocMeter):
    prev = getattr(_local, "meter", None)
    _local.meter = meter
    try:
        yield meter
    finally:
        _local.meter = prev


@contextmanager
def counting(counter: FlopCounter):
    prev = getattr(_local, "flops", None)
    _local.flops = counter
    try:
        yield counter
    finally:
        _local.flops = prev


def alloc_scope(meter: AllocMeter, body: Callable[[], object]) -> int:
    """Run ``body`` with ``meter`` zeroed and attached; return the peak
    number of simultaneously live Matrix elements created inside it.

    The body's return value is dropped before the scope closes.
    """
    meter.reset()
    with metered(meter):
        body()
    return meter.high_water


def count_madds(n: int):
    c = getattr(_local, "flops", None)
    if c is not None:
        c.add(n)


# ---------------------------------------------------------------------------
# Matrix


class Matrix:
    """Immutable 2-D float64 matrix (row-major).

    ``data`` is a read-only numpy view. Entries are finite except for the
    ``-inf`` mask sentinel, which only :func:`row_softmax` consumes.
    """

    __slots__ = ("_a", "_meter", "__weakref__")

    def __init__(self, data):
        a = np.array(data, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
        if a.ndim != 2:
            raise ShapeError(f"Matrix needs 2-D data, got shape {a.shape}")
        self._init(a)

    def _init(self, a: np.ndarray):
        if np.isnan(a).any() or np.isposinf(a).any():
            raise FloatingPointError("non-finite entry in Matrix")
        a.flags.writeable = False
        self._a = a
        meter = getattr(_local, "meter", None)
        self._meter = meter
        if meter is not None:
            meter.alloc(a.size)

    def __del__(self):
        meter = getattr(self, "_meter", None)
        if meter is not None:
            meter.free(self._a.size)

    @classmethod
    def wrap(cls, a: np.ndarray) -> "Matrix":
        """Adopt a freshly computed float64 array without copying."""
        m = cls.__new__(cls)
        if a.dtype != np.float64:
            a = a.astype(np.float64)
        if a.ndim != 2:
            raise ShapeError(f"Matrix needs 2-D data, got shape {a.shape}")
        m._init(a)
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls.wrap(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls.wrap(np.eye(n))

    @property
    def data(self) -> np.ndarray:
        return self._a

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    def __len__(self):
        return self._a.shape[0]

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._a, other._a)

    __hash__ = None

    def tolist(self) -> list[list[float]]:
        return self._a.tolist()

    @property
    def T(self) -> "Matrix":
        return Matrix.wrap(np.ascontiguousarray(self._a.T))

    def __add__(self, other: "Matrix") -> "Matrix":
        _same_shape(self, other, "add")
        return Matrix.wrap(self._a + other._a)

    def __sub__(self, other: "Matrix") -> "Matrix":
        _same_shape(self, other, "sub")
        return Matrix.wrap(self._a - other._a)

    def scale(self, s: float) -> "Matrix":
        return Matrix.wrap(self._a * s)

    def hadamard(self, other: "Matrix") -> "Matrix":
        _same_shape(self, other, "hadamard")
        return Matrix.wrap(self._a * other._a)

    def cols_slice(self, start: int, stop: int) -> "Matrix":
        return Matrix.wrap(np.ascontiguousarray(self._a[:, start:stop]))

    def take_rows(self, idx) -> "Matrix":
        """Gather rows by an integer index array of any shape; the result
        has ``idx.size`` rows."""
        idx = np.asarray(idx, dtype=np.intp).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.rows):
            raise IndexError(f"row index out of range for {self.rows} rows")
        return Matrix.wrap(self._a[idx])


def _same_shape(a: Matrix, b: Matrix, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def hstack(parts: Sequence[Matrix]) -> Matrix:
    return Matrix.wrap(np.hstack([p.data for p in parts]))


def vstack(parts: Sequence[Matrix]) -> Matrix:
    return Matrix.wrap(np.vstack([p.data for p in parts]))


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _mm_kernel(a, b, out):  # pragma: no cover - compiled
    nb = b.shape[0]
    for z in range(a.shape[0]):
        zb = z if nb > 1 else 0
        for i in range(a.shape[1]):
            for t in range(a.shape[2]):
                x = a[z, i, t]
                for j in range(b.shape[2]):
                    out[z, i, j] += x * b[zb, t, j]


@njit(cache=True)
def _tn_kernel(a, b, out):  # pragma: no cover - compiled
    for t in range(a.shape[0]):
        for i in range(a.shape[1]):
            x = a[t, i]
            for j in range(b.shape[1]):
                out[i, j] += x * b[t, j]


def matmul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fixed-order product on raw arrays (i, k, j loop order).

    Leading dimensions broadcast, so ``(B, m, n) @ (B, n, p)`` batches and
    ``(..., m, n) @ (n, p)`` applies one matrix to every row. Each output
    element sums its products in ascending inner index, with no fused
    multiply-add, so batched and unbatched calls agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[-1]
    if a.ndim < 2 or b.ndim < 2 or b.shape[-2] != n:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    p = b.shape[-1]
    if b.ndim == 2:
        out_shape = a.shape[:-1] + (p,)
        a3 = np.ascontiguousarray(a).reshape(1, -1, n)
        b3 = np.ascontiguousarray(b).reshape(1, n, p)
    else:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        m = a.shape[-2]
        out_shape = lead + (m, p)
        a3 = np.ascontiguousarray(np.broadcast_to(a, lead + (m, n))).reshape(-1, m, n)
        b3 = np.ascontiguousarray(np.broadcast_to(b, lead + (n, p))).reshape(-1, n, p)
    out = np.zeros((a3.shape[0], a3.shape[1], p))
    _mm_kernel(a3, b3, out)
    count_madds(out.size * n)
    return out.reshape(out_shape)


def matmul_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` for tall 2-D operands (weight gradients), accumulated
    over rows in ascending order."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn: shapes {a.shape} and {b.shape} do not align")
    out = np.zeros((a.shape[1], b.shape[1]))
    _tn_kernel(np.ascontiguousarray(a, dtype=np.float64),
               np.ascontiguousarray(b, dtype=np.float64), out)
    count_madds(a.shape[0] * a.shape[1] * b.shape[1])
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    return Matrix.wrap(matmul_array(a.data, b.data))


def naive_matmul(a: Matrix, b: Matrix) -> Matrix:
    """Pure-Python triple loop; reference for tests."""
    A, B = a.tolist(), b.tolist()
    m, n, p = a.rows, a.cols, b.cols
    if n != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = [[0.0] * p for _ in range(m)]
    for i in range(m):
        row = out[i]
        for k in range(n):
            aik = A[i][k]
            Bk = B[k]
            for j in range(p):
                row[j] += aik * Bk[j]
    return Matrix(out) if m and p else Matrix.zeros(m, p)


def softmax_rows_array(x: np.ndarray, scale: float) -> np.ndarray:
    """Row softmax of ``x * scale`` over entries that are not ``-inf``."""
    s = x * scale
    mx = s.max(axis=1, keepdims=True)
    if np.isneginf(mx).any():
        bad = int(np.flatnonzero(np.isneginf(mx[:, 0]))[0])
        raise ValueError(f"row {bad} is entirely masked: no permitted entries")
    e = np.exp(s - mx)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(scores: Matrix, scale: float) -> Matrix:
    if not scale > 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    return Matrix.wrap(softmax_rows_array(scores.data, scale))


def masked_fill(scores: Matrix, allowed: np.ndarray) -> Matrix:
    """Copy of ``scores`` with every entry where ``allowed`` is False set to
    the ``-inf`` sentinel."""
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != scores.shape:
        raise ShapeError(f"mask shape {allowed.shape} != scores {scores.shape}")
    return Matrix.wrap(np.where(allowed, scores.data, NEG_INF))


# ---------------------------------------------------------------------------
# RNG


def _splitmix64(x: int):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class RngStream:
    """xoshiro256** seeded through SplitMix64.

    Integer-only state transitions, so a seed yields the same stream on any
    platform. Floats are the top 53 bits scaled to [0, 1); normals use
    Box-Muller on pairs of uniforms.
    """

    def __init__(self, seed: int):
        x = seed & _MASK64
        s = []
        for _ in range(4):
            x, z = _splitmix64(x)
            s.append(z)
        self._s = s
        self.seed = seed

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("integer() needs n > 0")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def choice(self, seq: Sequence):
        if not len(seq):
            raise ValueError("cannot choose from an empty sequence")
        return seq[self.integer(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            p[i], p[j] = p[j], p[i]
        return np.array(p, dtype=np.intp)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        u = np.array([self.random() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n + (n & 1))
        for i in range(0, n, 2):
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        return (std * out[:n]).reshape(shape)

    def matrix(self, rows: int, cols: int, std: float = 1.0) -> Matrix:
        return Matrix.wrap(self.normal((rows, cols), std))

    def spawn(self) -> "RngStream":
        """Independent child stream seeded from this one."""
        return RngStream(self.next_u64())


def max_abs_diff(a, b) -> float:
    a = a.data if isinstance(a, Matrix) else np.asarray(a)
    b = b.data if isinstance(b, Matrix) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def as_matrices(items: Iterable) -> list[Matrix]:
    return [x if isinstance(x, Matrix) else Matrix(x) for x in items]
