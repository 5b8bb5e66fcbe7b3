import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keysem.attention import (ProjectionParams, attention_backward, dense_attention,
                              gather_fault, linear_proj, semanir_att, semanir_att_gather,
                              semanir_att_mask)
from keysem.cost_model import measured_peak, peak_elements_gather, peak_elements_mask
from keysem.dictionary import KeySemanticDictionary, build_dictionary
from keysem.gradcheck import check_attention
from keysem.tensor_core import Matrix, RngStream, ShapeError, max_abs_diff


def loop_oracle(Q, K, V, neighbors, heads):
    """Per-query, per-head softmax over the listed keys with math.exp."""
    N, d = Q.shape
    hd = d // heads
    out = np.zeros((N, d))
    for i in range(N):
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            s = [float(Q[i, sl] @ K[j, sl]) / math.sqrt(hd) for j in neighbors[i]]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            z = sum(e)
            for w, j in zip(e, neighbors[i]):
                out[i, sl] += (w / z) * V[j, sl]
    return out


@st.composite
def attn_case(draw):
    N = draw(st.integers(2, 20))
    heads = draw(st.sampled_from([1, 2, 4]))
    d = heads * draw(st.integers(1, 3))
    k = draw(st.integers(1, N - 1))
    rng = RngStream(draw(st.integers(0, 2 ** 32)))
    Q, K, V = rng.matrix(N, d), rng.matrix(N, d), rng.matrix(N, d)
    return Q, K, V, build_dictionary(rng.matrix(N, 3), k), heads


def test_hand_example():
    Q = Matrix([[1.0], [0.0], [2.0]])
    K = Matrix([[0.0], [1.0], [math.log(2.0)]])
    V = Matrix([[10.0], [20.0], [30.0]])
    dic = KeySemanticDictionary(np.array([[1, 2], [0, 2], [0, 1]]))
    # query 0: scores 1 and log 2 -> weights e/(e+2), 2/(e+2)
    e = math.e
    expected0 = (20 * e + 30 * 2) / (e + 2)
    for variant in ("gather", "mask"):
        out = semanir_att(Q, K, V, dic, 1, variant).tokens.data
        assert out[0, 0] == pytest.approx(expected0, rel=1e-14)
        assert out[1, 0] == pytest.approx(20.0, rel=1e-14)  # zero query: uniform over {0, 2}


@given(attn_case())
def test_variants_match_loop_oracle(case):
    Q, K, V, dic, heads = case
    ref = loop_oracle(Q.data, K.data, V.data, dic.neighbors, heads)
    for fn in (semanir_att_gather, semanir_att_mask):
        assert max_abs_diff(fn(Q, K, V, dic, heads).tokens, ref) < 1e-12


@given(attn_case())
def test_weights_are_distributions_over_dictionary(case):
    Q, K, V, dic, heads = case
    wg = semanir_att_gather(Q, K, V, dic, heads, return_weights=True).weights
    wm = semanir_att_mask(Q, K, V, dic, heads, return_weights=True).weights
    assert wg.shape == (heads, dic.N, dic.k)
    np.testing.assert_allclose(wg.sum(axis=-1), 1.0, rtol=1e-13)
    np.testing.assert_allclose(wg, wm, atol=1e-14)


def test_full_dictionary_is_bitwise_dense():
    rng = RngStream(9)
    Q, K, V = rng.matrix(12, 4), rng.matrix(12, 4), rng.matrix(12, 4)
    dic = build_dictionary(rng.matrix(12, 2), 11)
    assert semanir_att_mask(Q, K, V, dic, 2).tokens == dense_attention(Q, K, V, 2, True).tokens


def test_heads_split_channels():
    rng = RngStream(10)
    Q, K, V = rng.matrix(8, 6), rng.matrix(8, 6), rng.matrix(8, 6)
    dic = build_dictionary(rng.matrix(8, 2), 3)
    two = semanir_att_gather(Q, K, V, dic, 2).tokens.data
    for h in range(2):
        parts = [m.cols_slice(3 * h, 3 * h + 3) for m in (Q, K, V)]
        np.testing.assert_allclose(two[:, 3 * h:3 * h + 3],
                                   semanir_att_gather(*parts, dic, 1).tokens.data, rtol=1e-14)


@given(attn_case(), st.integers(0, 2 ** 32))
def test_permutation_equivariance(case, seed):
    Q, K, V, dic, heads = case
    perm = RngStream(seed).permutation(Q.rows)
    base = semanir_att_gather(Q, K, V, dic, heads).tokens.data
    out = semanir_att_gather(Q.take_rows(perm), K.take_rows(perm), V.take_rows(perm),
                             dic.permuted(perm), heads).tokens.data
    assert np.abs(out - base[perm]).max() <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    errs = check_attention(RngStream(seed))
    assert max(errs.values()) < 1e-6


def test_backward_shape_check():
    rng = RngStream(1)
    Q = rng.matrix(4, 2)
    with pytest.raises(ShapeError):
        attention_backward(Q, Q, Q, build_dictionary(Q, 2), 1, Matrix.zeros(3, 2))


@given(st.integers(2, 40), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.data())
def test_peaks_match_meter(N, hd, heads, data):
    k = data.draw(st.integers(1, N - 1))
    d = hd * heads
    rng = RngStream(N * 100 + k)
    assert measured_peak(N, k, d, heads, "gather", rng) == peak_elements_gather(N, k, d, heads)
    assert measured_peak(N, k, d, heads, "mask", rng) == peak_elements_mask(N, k, d, heads)


def test_fault_injection_breaks_gather():
    rng = RngStream(2)
    Q, K, V = rng.matrix(10, 4), rng.matrix(10, 4), rng.matrix(10, 4)
    dic = build_dictionary(rng.matrix(10, 2), 3)
    with gather_fault():
        bad = semanir_att_gather(Q, K, V, dic).tokens
    assert max_abs_diff(bad, semanir_att_mask(Q, K, V, dic).tokens) > 1e-3


def test_errors():
    rng = RngStream(3)
    Q = rng.matrix(5, 4)
    with pytest.raises(ShapeError):
        semanir_att_gather(Q, Q, Q, build_dictionary(Q, 2), heads=3)
    with pytest.raises(ShapeError):
        semanir_att_mask(Q, Q, Q, build_dictionary(rng.matrix(6, 4), 2))
    with pytest.raises(ValueError):
        semanir_att(Q, Q, Q, build_dictionary(Q, 2), variant="fused")
    with pytest.raises(ShapeError):
        ProjectionParams(rng.matrix(3, 4), rng.matrix(3, 4), rng.matrix(3, 4), heads=3)
    p = ProjectionParams(rng.matrix(3, 4), rng.matrix(3, 4), rng.matrix(3, 4), heads=2)
    with pytest.raises(ShapeError):
        linear_proj(Q, p)
