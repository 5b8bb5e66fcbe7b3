"""Closed-form operation counts and peak-element counts for attention.

Time and space formulas for MSA, window MSA and dictionary-restricted MSA
count projection and attention terms only; softmax and FFN are excluded.
``stage_comparison`` is the per-stage difference between a W-MSA stage
and a shared-dictionary stage, which pays for one dictionary construction
and then ``2k`` instead of ``2 M^2`` per token.

``token_pixels`` is the number of pixels per token: 1 for this package's
pixel tokens, 256 to mirror a 16x16-patch setting. A window then holds
``M*M*token_pixels`` pixels.

Counts are exact Python integers; results beyond int64 raise OverflowError
so JSON consumers never see silently wrapped numbers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import linear_proj, ProjectionParams, semanir_att_gather, semanir_att_mask
from .dictionary import build_dictionary, similarity
from .tensor_core import (AllocMeter, FlopCounter, Matrix, RngStream, alloc_scope,
                          counting, matmul)

_INT64_MAX = (1 << 63) - 1


def _checked(x: int) -> int:
    if x > _INT64_MAX or x < -_INT64_MAX:
        raise OverflowError(f"operation count {x} exceeds int64")
    return x


@dataclass(frozen=True)
class CostInputs:
    H: int
    W: int
    C: int
    M: int
    k: int
    heads: int = 1
    n_layers: int = 6
    token_pixels: int = 1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise TypeError(f"{name} must be an integer, got {v!r}")
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        if self.k > self.window_pixels:
            raise ValueError(f"k={self.k} exceeds window pixels {self.window_pixels}")

    @property
    def HW(self) -> int:
        return self.H * self.W

    @property
    def window_pixels(self) -> int:
        return self.M * self.M * self.token_pixels


def time_msa(ci: CostInputs) -> int:
    """4HWC^2 + 2(HW)^2 C"""
    return _checked(4 * ci.HW * ci.C ** 2 + 2 * ci.HW ** 2 * ci.C)


def time_wmsa(ci: CostInputs) -> int:
    """4HWC^2 + 2 M^2 HWC (M^2 counted in pixels)"""
    return _checked(4 * ci.HW * ci.C ** 2 + 2 * ci.window_pixels * ci.HW * ci.C)


def time_semanir(ci: CostInputs) -> int:
    """4HWC^2 + 2kHWC"""
    return _checked(4 * ci.HW * ci.C ** 2 + 2 * ci.k * ci.HW * ci.C)


def space_msa(ci: CostInputs) -> int:
    return _checked(4 * ci.HW * ci.C ** 2 + 2 * ci.heads * ci.HW ** 2 * ci.C)


def space_wmsa(ci: CostInputs) -> int:
    return _checked(4 * ci.HW * ci.C ** 2 + 2 * ci.heads * ci.window_pixels * ci.HW * ci.C)


def space_semanir(ci: CostInputs) -> int:
    return _checked(4 * ci.HW * ci.C ** 2 + 2 * ci.heads * ci.k * ci.HW * ci.C)


def dict_cost(ci: CostInputs) -> int:
    """(HW)^2 C: all-pairs dot products over the map, once per stage."""
    return _checked(ci.HW ** 2 * ci.C)


@dataclass(frozen=True)
class StageComparison:
    stage_diff: int  # n_layers * (wmsa - semanir) - dict_cost
    window_term: int  # 2 n_layers M^2 (12 M^2 for six layers)
    k_term: int  # 2 n_layers k
    map_term: int  # HW
    per_hwc: int  # window_term - k_term - map_term


def stage_comparison(ci: CostInputs) -> StageComparison:
    """Positive iff a shared-dictionary stage is cheaper than a W-MSA stage.

    The difference factors as ``(2 L M^2 - 2 L k - HW) * HWC`` for ``L``
    layers, returned term by term alongside the full count.
    """
    if ci.n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    diff = ci.n_layers * (time_wmsa(ci) - time_semanir(ci)) - dict_cost(ci)
    wt = 2 * ci.n_layers * ci.window_pixels
    kt = 2 * ci.n_layers * ci.k
    per = wt - kt - ci.HW
    assert diff == per * ci.HW * ci.C
    return StageComparison(_checked(diff), wt, kt, ci.HW, per)


# ---------------------------------------------------------------------------
# peak live elements for the two sparse realizations (one window)
#
# gather: K_hat and V_hat (N*k x d each) stay live while the (N x h*k)
#   score matrix, then its softmax, then the N x d output are created:
#       2Nkd + hNk + max(hNk, Nd)
# mask: the (h*N x N) score matrix, its masked copy, its softmax and the
#   N x d output, each predecessor freed as soon as it is consumed:
#       hN^2 + max(hN^2, Nd)
# Operands (Q, K, V, dictionary) are allocated by the caller and excluded.


def peak_elements_gather(N: int, k: int, d: int, heads: int) -> int:
    return 2 * N * k * d + heads * N * k + max(heads * N * k, N * d)


def peak_elements_mask(N: int, k: int, d: int, heads: int) -> int:
    return heads * N * N + max(heads * N * N, N * d)


def peak_elements(ci: CostInputs, variant: str) -> int:
    """Per-window peak with ``N = M^2 * token_pixels`` tokens and ``d = C``."""
    N = ci.window_pixels
    if variant == "gather":
        return _checked(peak_elements_gather(N, ci.k, ci.C, ci.heads))
    if variant == "mask":
        return _checked(peak_elements_mask(N, ci.k, ci.C, ci.heads))
    raise ValueError(f"unknown variant {variant!r}")


def random_attention_case(N: int, k: int, d: int, heads: int, rng: RngStream,
                          dict_dim: int = 4):
    """Q, K, V (N x d) and a dictionary built from random tokens."""
    Q, K, V = rng.matrix(N, d), rng.matrix(N, d), rng.matrix(N, d)
    dic = build_dictionary(rng.matrix(N, dict_dim), k)
    return Q, K, V, dic


def measured_peak(N: int, k: int, d: int, heads: int, variant: str,
                  rng: RngStream, case=None) -> int:
    """Peak live Matrix elements of one attention call, via AllocMeter."""
    Q, K, V, dic = case if case is not None else random_attention_case(N, k, d, heads, rng)
    fn = semanir_att_gather if variant == "gather" else semanir_att_mask
    return alloc_scope(AllocMeter(), lambda: fn(Q, K, V, dic, heads))


def instrumented_time_semanir(ci: CostInputs, rng: RngStream) -> int:
    """Multiply-adds actually executed by Q/K/V projection, gather attention
    and output projection over every window of an ``H x W`` map with
    ``d = C``. Comparable to :func:`time_semanir` for ``token_pixels == 1``.
    """
    if ci.token_pixels != 1:
        raise ValueError("instrumented count needs pixel tokens (token_pixels=1)")
    N = ci.M * ci.M
    if ci.HW % N:
        raise ValueError("map must tile exactly into windows")
    d = ci.C
    proj = ProjectionParams(rng.matrix(ci.C, d), rng.matrix(ci.C, d), rng.matrix(ci.C, d),
                            ci.heads)
    w_out = rng.matrix(d, ci.C)
    counter = FlopCounter()
    for _ in range(ci.HW // N):
        tokens = rng.matrix(N, ci.C)
        dic = build_dictionary(tokens, ci.k)
        with counting(counter):
            Q, K, V = linear_proj(tokens, proj)
            att = semanir_att_gather(Q, K, V, dic, ci.heads)
            matmul(att.tokens, w_out)
    return counter.madds


def instrumented_dict_cost(H: int, W: int, C: int, rng: RngStream) -> int:
    """Multiply-adds of one all-pairs similarity over the whole map."""
    tokens = Matrix.wrap(rng.normal((H * W, C)))
    counter = FlopCounter()
    with counting(counter):
        similarity(tokens)
    return counter.madds


def cost_report(ci: CostInputs) -> dict:
    cmp_ = stage_comparison(ci)
    return {
        "inputs": asdict(ci),
        "time": {"msa": time_msa(ci), "wmsa": time_wmsa(ci), "semanir": time_semanir(ci)},
        "space": {"gather": peak_elements(ci, "gather"), "mask": peak_elements(ci, "mask")},
        "table_space": {"msa": space_msa(ci), "wmsa": space_wmsa(ci),
                        "semanir": space_semanir(ci)},
        "dict_cost": dict_cost(ci),
        "stage_diff": cmp_.stage_diff,
        "stage_diff_factored": {
            "window_term": cmp_.window_term,
            "k_term": cmp_.k_term,
            "map_term": cmp_.map_term,
            "per_hwc": cmp_.per_hwc,
            "hwc": ci.HW * ci.C,
        },
        "shared_dictionary_cheaper": cmp_.stage_diff > 0,
    }

