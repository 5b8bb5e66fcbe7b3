import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keysem.patching import (ConvParams, FeatureMap, conv3x3, conv3x3_array, conv3x3_backward,
                             merge_array, merge_backward, partition_array, partition_backward,
                             window_merge, window_partition)
from keysem.tensor_core import RngStream, ShapeError


@st.composite
def map_and_window(draw):
    M = draw(st.integers(2, 5))
    H = draw(st.integers(max(1, (M + 1) // 2), 11))
    W = draw(st.integers(max(1, (M + 1) // 2), 11))
    C = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2 ** 32))
    return RngStream(seed).normal((H, W, C)), M


@given(map_and_window())
def test_partition_merge_round_trip(case):
    x, M = case
    f = FeatureMap(x)
    ws = window_partition(f, M)
    assert all(w.N == M * M for w in ws.windows)
    assert window_merge(ws, f.H, f.W) == f


@given(map_and_window(), st.integers(0, 2 ** 32))
def test_partition_and_merge_adjoints(case, seed):
    x, M = case
    H, W, C = x.shape
    t = partition_array(x, M)
    y = RngStream(seed).normal(t.shape)
    np.testing.assert_allclose((t * y).sum(), (x * partition_backward(y, H, W)).sum(),
                               rtol=1e-12, atol=1e-12)
    z = RngStream(seed + 1).normal(x.shape)
    np.testing.assert_allclose((merge_array(y, H, W) * z).sum(),
                               (y * merge_backward(z, t.shape[0], M)).sum(),
                               rtol=1e-12, atol=1e-12)


def test_reflect_padding_hand_example():
    # 3x3 map, windows of 2: padded row/col 3 mirrors row/col 1
    x = np.arange(9.0).reshape(3, 3)
    ws = window_partition(FeatureMap(x), 2)
    assert (ws.grid_rows, ws.grid_cols, ws.pad_spec) == (2, 2, (1, 1))
    assert ws.windows[3].tokens.data[:, 0].tolist() == [8.0, 7.0, 5.0, 4.0]
    assert ws.windows[0].tokens.data[:, 0].tolist() == [0.0, 1.0, 3.0, 4.0]


def test_window_size_limits():
    f = FeatureMap(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        window_partition(f, 1)
    with pytest.raises(ValueError):
        window_partition(f, 7)


def _conv_loop(x, kernel, bias):
    H, W, _ = x.shape
    out = np.tile(bias, (H, W, 1)).astype(float)
    for i in range(H):
        for j in range(W):
            for dy in range(3):
                for dx in range(3):
                    r, c = i + dy - 1, j + dx - 1
                    if 0 <= r < H and 0 <= c < W:
                        out[i, j] += x[r, c] @ kernel[dy, dx]
    return out


def test_conv_matches_loop_and_identity():
    rng = RngStream(5)
    x = rng.normal((5, 4, 2))
    p = ConvParams(rng.normal((3, 3, 2, 3)), rng.normal(3))
    np.testing.assert_allclose(conv3x3_array(x, p), _conv_loop(x, p.kernel, p.bias), rtol=1e-12)
    assert conv3x3(FeatureMap(x), ConvParams.identity(2)) == FeatureMap(x)
    with pytest.raises(ShapeError):
        conv3x3_array(x, ConvParams.zeros(3, 3))


def test_conv_backward_adjoint():
    rng = RngStream(6)
    x = rng.normal((4, 5, 2))
    p = ConvParams(rng.normal((3, 3, 2, 3)), rng.normal(3))
    g = rng.normal((4, 5, 3))
    dx, dk, db = conv3x3_backward(x, p, g)
    lin = conv3x3_array(x, ConvParams(p.kernel, np.zeros(3)))
    np.testing.assert_allclose((lin * g).sum(), (x * dx).sum(), rtol=1e-12)
    np.testing.assert_allclose((lin * g).sum(), (p.kernel * dk).sum(), rtol=1e-12)
    np.testing.assert_allclose(db, g.sum(axis=(0, 1)), rtol=1e-12)
