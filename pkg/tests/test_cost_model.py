import pytest
from hypothesis import given
from hypothesis import strategies as st

from keysem.cost_model import (CostInputs, cost_report, dict_cost, instrumented_dict_cost,
                               instrumented_time_semanir, peak_elements, space_semanir,
                               stage_comparison, time_msa, time_semanir, time_wmsa)
from keysem.tensor_core import RngStream


def test_hand_counts():
    ci = CostInputs(H=4, W=4, C=2, M=2, k=3)
    # 4*16*4 = 256 projection; 2*16*16*2 = 1024; 2*4*16*2 = 256; 2*3*16*2 = 192
    assert time_msa(ci) == 256 + 1024
    assert time_wmsa(ci) == 256 + 256
    assert time_semanir(ci) == 256 + 192
    assert dict_cost(ci) == 16 * 16 * 2
    assert space_semanir(CostInputs(4, 4, 2, 2, 3, heads=2)) == 256 + 384


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 64), st.integers(1, 16),
       st.integers(1, 4), st.integers(1, 8), st.integers(1, 256))
def test_factored_stage_difference(H, W, C, M, heads, layers, tp):
    ci = CostInputs(H, W, C, M, M * M * tp // 2, heads, layers, tp)
    cmp_ = stage_comparison(ci)
    assert cmp_.stage_diff == cmp_.per_hwc * H * W * C
    assert cmp_.window_term == 2 * layers * M * M * tp


def test_peaks_use_window_tokens():
    ci = CostInputs(16, 16, 8, 4, 5, heads=2)
    assert peak_elements(ci, "gather") == 2 * 16 * 5 * 8 + 2 * 16 * 5 + max(2 * 16 * 5, 16 * 8)
    assert peak_elements(ci, "mask") == 2 * 256 + max(2 * 256, 128)
    with pytest.raises(ValueError):
        peak_elements(ci, "dense")


def test_validation():
    with pytest.raises(TypeError):
        CostInputs(4.0, 4, 1, 2, 1)
    with pytest.raises(ValueError):
        CostInputs(4, 4, 1, 2, -1)
    with pytest.raises(ValueError):
        CostInputs(4, 4, 1, 2, 5)
    with pytest.raises(OverflowError):
        time_msa(CostInputs(1 << 20, 1 << 20, 1 << 10, 2, 1))


def test_instrumented_counts_equal_formulas():
    ci = CostInputs(8, 8, 4, 4, 5, heads=2)
    rng = RngStream(0)
    assert instrumented_time_semanir(ci, rng) == time_semanir(ci)
    assert instrumented_dict_cost(8, 8, 4, rng) == dict_cost(ci)


def test_report_is_json_ready():
    import json
    rep = cost_report(CostInputs(8, 8, 4, 4, 5))
    assert json.loads(json.dumps(rep)) == rep
    assert rep["shared_dictionary_cheaper"] == (rep["stage_diff"] > 0)
