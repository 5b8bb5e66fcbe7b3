"""Feature maps, window partitioning into pixel tokens, and 3x3 convolution.

Tokens are single pixels; a window of side ``M`` holds ``M*M`` tokens in
row-major scan order. Maps whose sides are not multiples of ``M`` are
reflect-padded at the bottom/right before tiling and cropped on merge.

Each forward op here has a matching adjoint (``*_backward``) used by the
hand-written training path in :mod:`keysem.stage`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor_core import Matrix, ShapeError, matmul_array


class FeatureMap:
    """``H x W x C`` grid of float64 values (read-only)."""

    __slots__ = ("data",)

    def __init__(self, data):
        a = np.array(data, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3:
            raise ShapeError(f"FeatureMap needs H x W x C data, got {a.shape}")
        if not np.isfinite(a).all():
            raise FloatingPointError("non-finite entry in FeatureMap")
        a.flags.writeable = False
        self.data = a

    @property
    def H(self) -> int:
        return self.data.shape[0]

    @property
    def W(self) -> int:
        return self.data.shape[1]

    @property
    def C(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None

    def __repr__(self):
        return f"FeatureMap({self.H}x{self.W}x{self.C})"


@dataclass(frozen=True)
class TokenSet:
    tokens: Matrix

    @property
    def N(self) -> int:
        return self.tokens.rows

    @property
    def C(self) -> int:
        return self.tokens.cols


@dataclass(frozen=True)
class WindowSet:
    window_size: int
    grid_rows: int
    grid_cols: int
    windows: list
    pad_spec: tuple  # (pad_bottom, pad_right)

    def __post_init__(self):
        if self.grid_rows * self.grid_cols != len(self.windows):
            raise ShapeError(
                f"{self.grid_rows}x{self.grid_cols} grid but {len(self.windows)} windows")
        n = self.window_size ** 2
        for w in self.windows:
            if w.N != n:
                raise ShapeError(f"window holds {w.N} tokens, expected {n}")

    @property
    def tokens_per_window(self) -> int:
        return self.window_size ** 2

    def stacked(self) -> np.ndarray:
        """All tokens as one ``(n_windows * M*M, C)`` array, window-major."""
        return np.vstack([w.tokens.data for w in self.windows])


@dataclass(frozen=True)
class ConvParams:
    kernel: np.ndarray  # (3, 3, C_in, C_out)
    bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[:2] != (3, 3):
            raise ShapeError(f"conv kernel must be 3x3xCinxCout, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.kernel.shape[3]},)")
        if not (np.isfinite(self.kernel).all() and np.isfinite(self.bias).all()):
            raise FloatingPointError("non-finite conv parameters")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[3]

    @classmethod
    def zeros(cls, c_in: int, c_out: int) -> "ConvParams":
        return cls(np.zeros((3, 3, c_in, c_out)), np.zeros(c_out))

    @classmethod
    def identity(cls, c: int) -> "ConvParams":
        k = np.zeros((3, 3, c, c))
        k[1, 1] = np.eye(c)
        return cls(k, np.zeros(c))


# ---------------------------------------------------------------------------
# partition / merge


def _padded_size(n: int, M: int) -> int:
    return -(-n // M) * M


def _check_window(H: int, W: int, M: int):
    if M < 2:
        raise ValueError(f"window size must be >= 2, got {M}")
    if M > 2 * min(H, W):
        raise ValueError(
            f"window size {M} exceeds twice the map side ({H}x{W}); reflect padding undefined")


@lru_cache(maxsize=64)
def partition_index(H: int, W: int, M: int) -> np.ndarray:
    """Flat source-pixel index for every token, shape ``(n_windows, M*M)``.

    Padded positions point at their reflected source pixel.
    """
    _check_window(H, W, M)
    Hp, Wp = _padded_size(H, M), _padded_size(W, M)
    rows = np.pad(np.arange(H), (0, Hp - H), mode="reflect")
    cols = np.pad(np.arange(W), (0, Wp - W), mode="reflect")
    src = rows[:, None] * W + cols[None, :]  # (Hp, Wp)
    gr, gc = Hp // M, Wp // M
    idx = src.reshape(gr, M, gc, M).transpose(0, 2, 1, 3).reshape(gr * gc, M * M)
    idx.flags.writeable = False
    return idx


@lru_cache(maxsize=64)
def merge_index(H: int, W: int, M: int) -> np.ndarray:
    """Token position (in window-major stacked order) of each original pixel,
    flat of length ``H*W``."""
    Wp = _padded_size(W, M)
    gc = Wp // M
    r = np.arange(H)[:, None]
    c = np.arange(W)[None, :]
    pos = ((r // M) * gc + (c // M)) * (M * M) + (r % M) * M + (c % M)
    pos = pos.reshape(-1)
    pos.flags.writeable = False
    return pos


def window_partition(f: FeatureMap, M: int) -> WindowSet:
    idx = partition_index(f.H, f.W, M)
    flat = f.data.reshape(-1, f.C)
    windows = [TokenSet(Matrix.wrap(flat[row])) for row in idx]
    Hp, Wp = _padded_size(f.H, M), _padded_size(f.W, M)
    return WindowSet(M, Hp // M, Wp // M, windows, (Hp - f.H, Wp - f.W))


def window_merge(ws: WindowSet, H: int, W: int) -> FeatureMap:
    M = ws.window_size
    if H + ws.pad_spec[0] != ws.grid_rows * M or W + ws.pad_spec[1] != ws.grid_cols * M:
        raise ShapeError(
            f"window set ({ws.grid_rows}x{ws.grid_cols} of {M}, pad {ws.pad_spec}) "
            f"does not match a {H}x{W} map")
    stacked = ws.stacked()
    return FeatureMap(stacked[merge_index(H, W, M)].reshape(H, W, -1))


def partition_array(x: np.ndarray, M: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(n_windows, M*M, C)`` token tensor."""
    H, W, C = x.shape
    return x.reshape(-1, C)[partition_index(H, W, M)]


def partition_backward(d_tokens: np.ndarray, H: int, W: int) -> np.ndarray:
    """Adjoint of :func:`partition_array`: reflected copies fold back onto
    their source pixels."""
    nw, n, C = d_tokens.shape
    M = int(round(n ** 0.5))
    out = np.zeros((H * W, C))
    np.add.at(out, partition_index(H, W, M).reshape(-1), d_tokens.reshape(-1, C))
    return out.reshape(H, W, C)


def merge_array(tokens: np.ndarray, H: int, W: int) -> np.ndarray:
    nw, n, C = tokens.shape
    M = int(round(n ** 0.5))
    return tokens.reshape(-1, C)[merge_index(H, W, M)].reshape(H, W, C)


def merge_backward(d_map: np.ndarray, n_windows: int, M: int) -> np.ndarray:
    """Adjoint of :func:`merge_array`; padded tokens receive zero."""
    H, W, C = d_map.shape
    out = np.zeros((n_windows * M * M, C))
    out[merge_index(H, W, M)] = d_map.reshape(-1, C)
    return out.reshape(n_windows, M * M, C)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray) -> np.ndarray:
    H, W, C = x.shape
    xp = np.zeros((H + 2, W + 2, C))
    xp[1:-1, 1:-1] = x
    cols = np.empty((H, W, 3, 3, C))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx, :] = xp[dy:dy + H, dx:dx + W]
    return cols.reshape(H * W, 9 * C)


def conv3x3_array(x: np.ndarray, p: ConvParams) -> np.ndarray:
    H, W, C = x.shape
    if C != p.c_in:
        raise ShapeError(f"conv expects {p.c_in} input channels, map has {C}")
    out = matmul_array(_im2col(x), p.kernel.reshape(9 * p.c_in, p.c_out)) + p.bias
    return out.reshape(H, W, p.c_out)


def conv3x3(f: FeatureMap, p: ConvParams) -> FeatureMap:
    """Same-size 3x3 convolution with zero-padded borders."""
    return FeatureMap(conv3x3_array(f.data, p))


def conv3x3_backward(x: np.ndarray, p: ConvParams, d_out: np.ndarray):
    """Returns ``(d_x, d_kernel, d_bias)`` for ``conv3x3_array(x, p)``."""
    H, W, C = x.shape
    g = d_out.reshape(H * W, p.c_out)
    cols = _im2col(x)
    d_kernel = matmul_array(np.ascontiguousarray(cols.T), g).reshape(p.kernel.shape)
    d_bias = g.sum(axis=0)
    d_cols = matmul_array(g, np.ascontiguousarray(p.kernel.reshape(9 * C, p.c_out).T))
    d_cols = d_cols.reshape(H, W, 3, 3, C)
    dxp = np.zeros((H + 2, W + 2, C))
    for dy in range(3):
        for dx in range(3):
            dxp[dy:dy + H, dx:dx + W] += d_cols[:, :, dy, dx, :]
    return dxp[1:-1, 1:-1], d_kernel, d_bias
