import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keysem.dictionary import (KeySemanticDictionary, build_dictionary, count_constructions,
                               dictionary_for_stage, similarity)
from keysem.patching import FeatureMap, window_partition
from keysem.tensor_core import Matrix, RngStream


@st.composite
def token_case(draw):
    N = draw(st.integers(2, 24))
    C = draw(st.integers(1, 6))
    k = draw(st.integers(1, N - 1))
    return RngStream(draw(st.integers(0, 2 ** 32))).matrix(N, C), k


def test_hand_example():
    t = Matrix([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    assert build_dictionary(t, 1).neighbors[:, 0].tolist() == [1, 0, 3, 2]
    assert build_dictionary(t, 2).neighbors.tolist() == [[1, 3], [0, 3], [3, 1], [2, 1]]


def test_ties_go_to_lower_index():
    t = Matrix(np.ones((5, 2)))
    assert build_dictionary(t, 3).neighbors.tolist() == [
        [1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2], [0, 1, 2]]


@given(token_case())
def test_dictionary_invariants(case):
    t, k = case
    dic = build_dictionary(t, k)
    sim = similarity(t).values.data
    assert np.array_equal(sim, sim.T)
    nb = dic.neighbors
    assert nb.shape == (t.rows, k)
    for i, row in enumerate(nb):
        assert i not in row
        assert len(set(row.tolist())) == k
        vals = sim[i, row]
        assert (np.diff(vals) <= 0).all()
        others = np.setdiff1d(np.arange(t.rows), np.append(row, i))
        if others.size:
            assert sim[i, others].max() <= vals[-1]


def test_include_self_allows_full_window():
    t = RngStream(1).matrix(6, 3)
    assert build_dictionary(t, 6, include_self=True).k == 6
    with pytest.raises(ValueError):
        build_dictionary(t, 6)
    with pytest.raises(ValueError):
        build_dictionary(t, 0)
    with pytest.raises(ValueError):
        build_dictionary(Matrix([[1.0]]), 1)


@given(token_case(), st.integers(0, 2 ** 32))
def test_permutation_commutes(case, seed):
    t, k = case
    perm = RngStream(seed).permutation(t.rows)
    assert np.array_equal(build_dictionary(t.take_rows(perm), k).neighbors,
                          build_dictionary(t, k).permuted(perm).neighbors)


def test_text_round_trip():
    dic = build_dictionary(RngStream(2).matrix(7, 3), 3)
    text = dic.dumps()
    assert text.splitlines()[0].startswith("0: ")
    assert np.array_equal(KeySemanticDictionary.loads(text).neighbors, dic.neighbors)


def test_stage_dictionaries_and_counter():
    ws = window_partition(FeatureMap(RngStream(3).normal((8, 8, 2))), 4)
    with count_constructions() as c:
        dicts = dictionary_for_stage(ws, 5)
    assert len(dicts) == 4 and c.events == 4
    assert all(d.k == 5 and d.N == 16 for d in dicts)
