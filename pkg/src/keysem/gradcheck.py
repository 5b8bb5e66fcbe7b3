"""Finite-difference verification of the hand-written gradients.

Each ``check_*`` builds one random instance, computes analytic gradients of
``L = 0.5 * ||output||^2`` (or ``0.5 * ||output - target||^2`` for the full
model) and compares them with central differences, step ``1e-5``. The error
for a parameter group is

    max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max(|a|_inf, |n|_inf))

i.e. relative per entry, with entries far below the group's scale measured
against a thousandth of that scale instead of their own size.
Large groups are checked on a seeded subset of coordinates.
"""
from __future__ import annotations

import math

import numpy as np

from .attention import (ProjectionParams, attention_backward, linear_proj,
                        linear_proj_backward, semanir_att_mask)
from .dictionary import build_dictionary
from .patching import ConvParams
from .stage import (FfnParams, Fixed, LayerParams, ModelParams, NormParams,
                    StageConfig, StageParams, _layer_backward, _layer_forward,
                    _stage_backward, _stage_forward, flatten, forward_backward,
                    init_model, l2_loss, layer_from_tensors, layer_tensors, unflatten)
from .tensor_core import Matrix, RngStream

STEP = 1e-5
LAYER_GROUPS = ["norm1.scale", "norm1.shift", "w_qry", "w_key", "w_val", "out_proj",
                "norm2.scale", "norm2.shift", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"]


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float((np.abs(a - n) / denom).max())


def _coords(shape, rng: RngStream, max_coords):
    total = int(np.prod(shape))
    if max_coords is None or total <= max_coords:
        return list(np.ndindex(*shape))
    flat = rng.permutation(total)[:max_coords]
    return [np.unravel_index(int(i), shape) for i in sorted(flat)]


def fd_check(loss_fn, arrays, grads, rng: RngStream, max_coords=None, h=None):
    """Compare ``grads`` with central differences of ``loss_fn(arrays)``.

    ``arrays`` is a list of float arrays; ``loss_fn`` receives a perturbed
    copy of the list. Returns the error of each group.
    """
    h = STEP if h is None else h
    errs = []
    for gi, (p, g) in enumerate(zip(arrays, grads)):
        coords = _coords(p.shape, rng, max_coords)
        num = np.empty(len(coords))
        ana = np.empty(len(coords))
        for ci, ix in enumerate(coords):
            vals = []
            for delta in (h, -h):
                pert = list(arrays)
                q = np.array(p, dtype=np.float64)
                q[ix] += delta
                pert[gi] = q
                vals.append(loss_fn(pert))
            num[ci] = (vals[0] - vals[1]) / (2 * h)
            ana[ci] = g[ix]
        errs.append(rel_error(ana, num))
    return errs


# ---------------------------------------------------------------------------
# random instances


def random_layer(rng: RngStream, C: int, d: int, heads: int, r: int = 4) -> LayerParams:
    s = 1.0 / math.sqrt(C)
    return LayerParams(
        NormParams(1.0 + 0.2 * rng.normal(C), 0.2 * rng.normal(C)),
        ProjectionParams(rng.matrix(C, d, s), rng.matrix(C, d, s), rng.matrix(C, d, s), heads),
        rng.normal((d, C), 1 / math.sqrt(d)),
        NormParams(1.0 + 0.2 * rng.normal(C), 0.2 * rng.normal(C)),
        FfnParams(rng.normal((C, r * C), s), 0.1 * rng.normal(r * C),
                  rng.normal((r * C, C), 1 / math.sqrt(r * C)), 0.1 * rng.normal(C)))


def random_conv(rng: RngStream, cin: int, cout: int) -> ConvParams:
    return ConvParams(rng.normal((3, 3, cin, cout), 1 / math.sqrt(9 * cin)), 0.1 * rng.normal(cout))


# ---------------------------------------------------------------------------
# checks


def check_attention(rng: RngStream, max_coords=None) -> dict:
    """Sparse attention (mask realization) plus Q/K/V projections."""
    N = 4 + rng.integer(9)
    C = 1 + rng.integer(6)
    heads = (1, 2)[rng.integer(2)]
    d = heads * (1 + rng.integer(3))
    k = 1 + rng.integer(N - 1)
    tokens = rng.matrix(N, C)
    proj = ProjectionParams(rng.matrix(C, d), rng.matrix(C, d), rng.matrix(C, d), heads)
    dic = build_dictionary(tokens, k)

    def loss_qkv(arrs):
        out = semanir_att_mask(*(Matrix(a) for a in arrs), dic, heads).tokens.data
        return 0.5 * float((out * out).sum())

    Q, K, V = linear_proj(tokens, proj)
    out = semanir_att_mask(Q, K, V, dic, heads).tokens
    g = attention_backward(Q, K, V, dic, heads, out)
    errs = dict(zip(["Q", "K", "V"],
                    fd_check(loss_qkv, [Q.data, K.data, V.data],
                             [g.d_q.data, g.d_k.data, g.d_v.data], rng, max_coords)))

    def loss_proj(arrs):
        p = ProjectionParams(Matrix(arrs[1]), Matrix(arrs[2]), Matrix(arrs[3]), heads)
        q, k_, v = linear_proj(Matrix(arrs[0]), p)
        o = semanir_att_mask(q, k_, v, dic, heads).tokens.data
        return 0.5 * float((o * o).sum())

    gb = linear_proj_backward(tokens, proj, g)
    errs.update(zip(["tokens", "w_qry", "w_key", "w_val"],
                    fd_check(loss_proj, [tokens.data, proj.w_qry.data, proj.w_key.data,
                                         proj.w_val.data],
                             [gb.d_tokens.data, gb.d_wqry.data, gb.d_wkey.data, gb.d_wval.data],
                             rng, max_coords)))
    return errs


def check_layer(rng: RngStream, max_coords=None) -> dict:
    N = 4 + rng.integer(13)
    C = 4 + rng.integer(3)
    heads = (1, 2)[rng.integer(2)]
    d = heads * (1 + rng.integer(3))
    k = 1 + rng.integer(N - 1)
    lp = random_layer(rng, C, d, heads, r=2)
    x = rng.normal((1, N, C))
    dic = build_dictionary(Matrix(x[0]), k)
    nb, allowed = dic.neighbors[None], dic.allowed_mask()[None]

    y, cache = _layer_forward(x, nb, allowed, lp, "mask")
    dx, grads = _layer_backward(cache, lp, y)

    def loss(arrs):
        out, _ = _layer_forward(arrs[0], nb, allowed, layer_from_tensors(heads, arrs[1:]), "mask")
        return 0.5 * float((out * out).sum())

    errs = fd_check(loss, [x] + layer_tensors(lp), [dx] + grads, rng, max_coords)
    return dict(zip(["tokens"] + LAYER_GROUPS, errs))


def _stage_instance(rng: RngStream, C: int, n_layers: int):
    heads = (1, 2)[rng.integer(2)]
    cfg = StageConfig(n_layers, 4, Fixed(1 + rng.integer(15)), heads=heads, embed=2 * heads)
    layers = tuple(random_layer(rng, C, cfg.embed, heads, r=2) for _ in range(n_layers))
    return StageParams(cfg, layers, random_conv(rng, C, C))


def check_stage(rng: RngStream, max_coords=4) -> dict:
    """Full stage on an 8x8 map: the dictionary is rebuilt from the perturbed
    input in every finite-difference evaluation, as in real use."""
    C = 4 + rng.integer(3)
    n_layers = 2
    sp = _stage_instance(rng, C, n_layers)
    x = rng.normal((8, 8, C))
    out, cache = _stage_forward(x, sp, None, "mask")
    dx, grads = _stage_backward(cache, sp, out)

    def loss(arrs):
        it = iter(arrs[1:])
        layers = tuple(layer_from_tensors(sp.config.heads, [next(it) for _ in range(12)])
                       for _ in range(n_layers))
        s = StageParams(sp.config, layers, ConvParams(next(it), next(it)))
        o, _ = _stage_forward(arrs[0], s, None, "mask")
        return 0.5 * float((o * o).sum())

    arrays = [x] + [t for lp in sp.layers for t in layer_tensors(lp)] + [sp.conv.kernel, sp.conv.bias]
    names = ["input"] + [f"layer{i}.{g}" for i in range(n_layers) for g in LAYER_GROUPS] + \
        ["conv.kernel", "conv.bias"]
    return dict(zip(names, fd_check(loss, arrays, [dx] + grads, rng, max_coords)))


def model_groups(mp: ModelParams) -> list:
    names = ["extract.kernel", "extract.bias"]
    for s, st in enumerate(mp.stages):
        for i in range(len(st.layers)):
            names += [f"stage{s}.layer{i}.{g}" for g in LAYER_GROUPS]
        names += [f"stage{s}.conv.kernel", f"stage{s}.conv.bias"]
    return names + ["reconstruct.kernel", "reconstruct.bias"]


def check_model(rng: RngStream, max_coords=4) -> dict:
    """Whole model on an 8x8x1 image with 4 channels and embed 4."""
    heads = (1, 2)[rng.integer(2)]
    cfg = StageConfig(2, 4, Fixed(1 + rng.integer(15)), heads=heads, embed=4)
    mp = init_model(rng, 1, 4, [cfg], ffn_expansion=2, zero_init_residual=False)
    base = flatten(mp)
    # move norms and biases off their trivial init values
    mp = unflatten(mp, [a + 0.1 * rng.normal(a.shape) for a in base])
    img = rng.normal((8, 8, 1))
    target = rng.normal((8, 8, 1))
    loss_fn = l2_loss(target)
    _, _, grads, ks = forward_backward(mp, img, loss_fn)

    def loss(arrs):
        return forward_backward(unflatten(mp, arrs), img, loss_fn, ks=ks)[0]

    return dict(zip(model_groups(mp), fd_check(loss, flatten(mp), grads, rng, max_coords)))


CHECKS = {"attention": check_attention, "layer": check_layer,
          "stage": check_stage, "model": check_model}
