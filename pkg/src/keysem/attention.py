"""Dense and dictionary-restricted multi-head attention.

Two interchangeable sparse realizations:

* gather: collect the ``k`` dictionary rows of K and V for each query
  (``N*k*d`` elements each) and attend over those only;
* mask: score every pair, overwrite non-dictionary entries with ``-inf``
  and run an ordinary row softmax (``h*N*N`` elements per score matrix).

Both return the same numbers; they differ in what they keep alive, which
``cost_model.peak_elements`` reproduces exactly. One dictionary serves all
heads and the softmax scale is ``1/sqrt(head_dim)``.

The ``*_arrays`` functions are batched over a leading window axis and back
the training path in :mod:`keysem.stage`.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dictionary import KeySemanticDictionary
from .patching import TokenSet
from .tensor_core import (Matrix, ShapeError, count_madds, masked_fill,
                          matmul, matmul_array, matmul_tn, row_softmax,
                          softmax_rows_array)

_gather_shift = 0


@contextmanager
def gather_fault(shift: int = 1):
    """Deliberately corrupt gather indices by ``shift`` (mod N).

    Fault injection for exercising the equivalence harness; never used on a
    normal code path.
    """
    global _gather_shift
    prev, _gather_shift = _gather_shift, shift
    try:
        yield
    finally:
        _gather_shift = prev


@dataclass(frozen=True)
class ProjectionParams:
    w_qry: Matrix
    w_key: Matrix
    w_val: Matrix
    heads: int = 1

    def __post_init__(self):
        shapes = {self.w_qry.shape, self.w_key.shape, self.w_val.shape}
        if len(shapes) != 1:
            raise ShapeError(f"projection weights disagree in shape: {sorted(shapes)}")
        if self.heads < 1 or self.d % self.heads:
            raise ShapeError(f"embed dim {self.d} not divisible by {self.heads} heads")

    @property
    def C(self) -> int:
        return self.w_qry.rows

    @property
    def d(self) -> int:
        return self.w_qry.cols

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass(frozen=True)
class AttentionOutput:
    tokens: Matrix
    # debug only: (heads, N, k) softmax weights at dictionary positions
    weights: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AttentionGrads:
    d_q: Matrix
    d_k: Matrix
    d_v: Matrix


@dataclass(frozen=True)
class GradBundle:
    d_tokens: Matrix
    d_wqry: Matrix
    d_wkey: Matrix
    d_wval: Matrix


def _tokens(t) -> Matrix:
    return t.tokens if isinstance(t, TokenSet) else t


def linear_proj(tokens, p: ProjectionParams):
    x = _tokens(tokens)
    if x.cols != p.C:
        raise ShapeError(f"tokens have {x.cols} channels, projection expects {p.C}")
    return matmul(x, p.w_qry), matmul(x, p.w_key), matmul(x, p.w_val)


def linear_proj_backward(tokens, p: ProjectionParams, grads: AttentionGrads) -> GradBundle:
    x = _tokens(tokens).data
    dq, dk, dv = grads.d_q.data, grads.d_k.data, grads.d_v.data
    d_x = (matmul_array(dq, p.w_qry.data.T) + matmul_array(dk, p.w_key.data.T)
           + matmul_array(dv, p.w_val.data.T))
    return GradBundle(Matrix.wrap(d_x), Matrix.wrap(matmul_tn(x, dq)),
                      Matrix.wrap(matmul_tn(x, dk)), Matrix.wrap(matmul_tn(x, dv)))


# ---------------------------------------------------------------------------
# batched array kernels: leading axes are free, last two are (N, d)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(..., N, d) -> (..., heads, N, d/heads)"""
    *lead, N, d = x.shape
    return x.reshape(*lead, N, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(..., heads, N, hd) -> (..., N, heads*hd)"""
    *lead, h, N, hd = x.shape
    return np.ascontiguousarray(x.swapaxes(-2, -3)).reshape(*lead, N, h * hd)


def masked_attention_arrays(q, k, v, allowed, heads: int):
    """Softmax attention restricted to ``allowed`` (bool, (..., N, N)).

    Returns ``(out, probs)`` with probs of shape (..., heads, N, N), zero at
    disallowed entries.
    """
    hd = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    s = matmul_array(qh, kh.swapaxes(-1, -2))
    s = np.where(allowed[..., None, :, :], s, -np.inf)
    lead = s.shape
    p = softmax_rows_array(s.reshape(-1, lead[-1]), 1.0 / math.sqrt(hd)).reshape(lead)
    return merge_heads(matmul_array(p, vh)), p


def masked_attention_backward_arrays(q, k, v, probs, heads: int, d_out):
    """Adjoint of :func:`masked_attention_arrays` with the mask held fixed."""
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    go = split_heads(d_out, heads)
    pt = probs.swapaxes(-1, -2)
    d_v = matmul_array(pt, go)
    d_p = matmul_array(go, vh.swapaxes(-1, -2))
    d_s = probs * (d_p - (probs * d_p).sum(axis=-1, keepdims=True)) * scale
    d_q = matmul_array(d_s, kh)
    d_k = matmul_array(d_s.swapaxes(-1, -2), qh)
    return merge_heads(d_q), merge_heads(d_k), merge_heads(d_v)


def gather_attention_arrays(q, k, v, neighbors, heads: int):
    """Batched gather variant: q, k, v (B, N, d); neighbors (B, N, k)."""
    B, N, d = q.shape
    hd = d // heads
    kk = neighbors.shape[-1]
    b = np.arange(B)[:, None, None]
    k_hat = k[b, neighbors].reshape(B, N, kk, heads, hd)
    v_hat = v[b, neighbors].reshape(B, N, kk, heads, hd)
    qh = q.reshape(B, N, 1, heads, hd)
    s = np.zeros((B, N, kk, heads))
    for c in range(hd):
        s += qh[..., c] * k_hat[..., c]
    s = np.moveaxis(s, 3, 2)  # (B, N, h, k)
    p = softmax_rows_array(s.reshape(-1, kk), 1.0 / math.sqrt(hd)).reshape(B, N, heads, kk)
    out = np.zeros((B, N, heads, hd))
    for j in range(kk):
        out += p[..., j, None] * v_hat[:, :, j]
    count_madds(2 * B * N * kk * d)
    return out.reshape(B, N, d)


# ---------------------------------------------------------------------------
# Matrix-level API (one window)


def _check_qkv(Q: Matrix, K: Matrix, V: Matrix, heads: int):
    if not (Q.shape == K.shape == V.shape):
        raise ShapeError(f"Q, K, V shapes differ: {Q.shape}, {K.shape}, {V.shape}")
    if heads < 1 or Q.cols % heads:
        raise ShapeError(f"dim {Q.cols} not divisible by {heads} heads")


def _check_dict(Q: Matrix, dic: KeySemanticDictionary):
    if dic.N != Q.rows:
        raise ShapeError(f"dictionary covers {dic.N} tokens, got {Q.rows}")
    if dic.k > Q.rows:
        raise ShapeError(f"dictionary k={dic.k} exceeds N={Q.rows}")
    nb = dic.neighbors
    if nb.size and (nb.min() < 0 or nb.max() >= Q.rows):
        raise IndexError(f"dictionary index out of range [0, {Q.rows})")


def _masked(Q: Matrix, K: Matrix, V: Matrix, allowed: np.ndarray, heads: int,
            neighbors: Optional[np.ndarray]) -> AttentionOutput:
    # live set: scores -> masked -> probs -> output, each freed after use
    N, d = Q.shape
    hd = d // heads
    scores = Matrix.wrap(matmul_array(split_heads(Q.data, heads),
                                      split_heads(K.data, heads).swapaxes(-1, -2))
                         .reshape(heads * N, N))
    masked = masked_fill(scores, np.tile(allowed, (heads, 1)))
    del scores
    probs = row_softmax(masked, 1.0 / math.sqrt(hd))
    del masked
    out = Matrix.wrap(merge_heads(matmul_array(probs.data.reshape(heads, N, N),
                                               split_heads(V.data, heads))))
    weights = None
    if neighbors is not None:
        p = probs.data.reshape(heads, N, N)
        weights = p[:, np.arange(N)[:, None], neighbors].copy()
    del probs
    return AttentionOutput(out, weights)


def dense_attention(Q: Matrix, K: Matrix, V: Matrix, heads: int = 1,
                    mask_diagonal: bool = False) -> AttentionOutput:
    """Full softmax attention; ``mask_diagonal`` forbids i -> i."""
    _check_qkv(Q, K, V, heads)
    N = Q.rows
    if mask_diagonal and N < 2:
        raise ValueError("mask_diagonal needs at least 2 tokens")
    allowed = ~np.eye(N, dtype=bool) if mask_diagonal else np.ones((N, N), dtype=bool)
    return _masked(Q, K, V, allowed, heads, None)


def semanir_att_mask(Q: Matrix, K: Matrix, V: Matrix, dic: KeySemanticDictionary,
                     heads: int = 1, return_weights: bool = False) -> AttentionOutput:
    _check_qkv(Q, K, V, heads)
    _check_dict(Q, dic)
    return _masked(Q, K, V, dic.allowed_mask(), heads,
                   dic.neighbors if return_weights else None)


def semanir_att_gather(Q: Matrix, K: Matrix, V: Matrix, dic: KeySemanticDictionary,
                       heads: int = 1, return_weights: bool = False) -> AttentionOutput:
    _check_qkv(Q, K, V, heads)
    _check_dict(Q, dic)
    N, d = Q.shape
    hd = d // heads
    kk = dic.k
    nb = dic.neighbors
    if _gather_shift:
        nb = (nb + _gather_shift) % N
    k_hat = K.take_rows(nb)  # (N*k) x d
    v_hat = V.take_rows(nb)
    kh = k_hat.data.reshape(N, kk, heads, hd)
    qh = Q.data.reshape(N, 1, heads, hd)
    s = np.zeros((N, kk, heads))
    for c in range(hd):
        s += qh[..., c] * kh[..., c]
    # scores laid out (N, heads*k): head-major blocks of k per query
    scores = Matrix.wrap(np.ascontiguousarray(np.moveaxis(s, 2, 1)).reshape(N, heads * kk))
    del s
    probs = Matrix.wrap(softmax_rows_array(scores.data.reshape(N * heads, kk),
                                           1.0 / math.sqrt(hd)).reshape(N, heads * kk))
    del scores
    p = probs.data.reshape(N, heads, kk)
    vh = v_hat.data.reshape(N, kk, heads, hd)
    acc = np.zeros((N, heads, hd))
    for j in range(kk):
        acc += p[..., j, None] * vh[:, j]
    out = Matrix.wrap(acc.reshape(N, d))
    count_madds(2 * N * kk * d)
    weights = np.ascontiguousarray(np.moveaxis(p, 1, 0)) if return_weights else None
    del p, probs, k_hat, v_hat, kh, vh
    return AttentionOutput(out, weights)


def semanir_att(Q, K, V, dic, heads=1, variant="gather", return_weights=False):
    if variant == "gather":
        return semanir_att_gather(Q, K, V, dic, heads, return_weights)
    if variant == "mask":
        return semanir_att_mask(Q, K, V, dic, heads, return_weights)
    raise ValueError(f"unknown attention variant {variant!r}")


def attention_backward(Q: Matrix, K: Matrix, V: Matrix, dic: KeySemanticDictionary,
                       heads: int, upstream: Matrix) -> AttentionGrads:
    """Reverse-mode gradients of the sparse attention w.r.t. Q, K, V.

    The dictionary is a hard selection and is treated as a constant.
    """
    _check_qkv(Q, K, V, heads)
    _check_dict(Q, dic)
    if upstream.shape != Q.shape:
        raise ShapeError(f"upstream {upstream.shape} != output {Q.shape}")
    _, probs = masked_attention_arrays(Q.data, K.data, V.data, dic.allowed_mask(), heads)
    dq, dk, dv = masked_attention_backward_arrays(Q.data, K.data, V.data, probs, heads,
                                                  upstream.data)
    return AttentionGrads(Matrix.wrap(dq), Matrix.wrap(dk), Matrix.wrap(dv))
