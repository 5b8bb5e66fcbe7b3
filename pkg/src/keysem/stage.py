"""Transformer layer, shared-dictionary stage, columnar model and training.

A stage partitions its input map into windows, builds one key-semantic
dictionary per window from the raw stage input, runs ``n_layers``
pre-norm layers that all reuse those dictionaries, merges the windows back
and closes with ``F_in + conv3x3(merged)``.

Gradients are hand-derived (no autodiff); the dictionary is a constant in
the backward pass. Parameter containers are frozen dataclasses; updates
build new ones.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .attention import (ProjectionParams, gather_attention_arrays,
                        masked_attention_arrays, masked_attention_backward_arrays)
from .dictionary import KeySemanticDictionary, build_dictionary
from .patching import (ConvParams, FeatureMap, TokenSet, conv3x3_array,
                       conv3x3_backward, merge_array, merge_backward,
                       partition_array, partition_backward)
from .tensor_core import Matrix, RngStream, ShapeError, matmul_array, matmul_tn

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608...
GELU_A = 0.044715


# ---------------------------------------------------------------------------
# window-level parallelism

_threads = 1


@contextmanager
def parallel_windows(n: int):
    """Run per-window attention on ``n`` worker threads inside the block.

    Windows are independent and results are reassembled in window order, so
    outputs do not depend on ``n``.
    """
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    prev, _threads = _threads, n
    try:
        yield
    finally:
        _threads = prev


def _per_window(fn, *arrays):
    """Apply ``fn`` to chunks of the leading (window) axis and reassemble."""
    B = arrays[0].shape[0]
    n = min(_threads, B)
    if n <= 1:
        return fn(*arrays)
    bounds = np.linspace(0, B, n + 1).astype(int)
    chunks = [tuple(a[lo:hi] for a in arrays) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=n) as ex:
        parts = list(ex.map(lambda c: fn(*c), chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(len(parts[0])))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# k policies


@dataclass(frozen=True)
class Fixed:
    k: int

    @property
    def values(self) -> tuple:
        return (self.k,)


@dataclass(frozen=True)
class RandomFrom:
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))


KPolicy = Union[Fixed, RandomFrom]


def sample_k(policy: KPolicy, rng: Optional[RngStream] = None) -> int:
    """One k for a whole stage call; every token uses the same k."""
    if isinstance(policy, Fixed):
        return policy.k
    if not policy.values:
        raise ValueError("RandomFrom needs at least one k value")
    if rng is None:
        raise ValueError("RandomFrom policy needs an RngStream")
    return policy.values[rng.integer(len(policy.values))]


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class NormParams:
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def identity(cls, c: int) -> "NormParams":
        return cls(np.ones(c), np.zeros(c))


@dataclass(frozen=True)
class FfnParams:
    w1: np.ndarray  # (C, r*C)
    b1: np.ndarray
    w2: np.ndarray  # (r*C, C)
    b2: np.ndarray

    def __post_init__(self):
        c, hidden = self.w1.shape
        if self.w2.shape != (hidden, c) or self.b1.shape != (hidden,) or self.b2.shape != (c,):
            raise ShapeError(f"inconsistent FFN shapes {self.w1.shape}, {self.w2.shape}")
        if hidden < c:
            raise ShapeError("FFN expansion must be >= 1")

    @property
    def expansion(self) -> int:
        return self.w1.shape[1] // self.w1.shape[0]

    @classmethod
    def zeros(cls, c: int, r: int = 4) -> "FfnParams":
        return cls(np.zeros((c, r * c)), np.zeros(r * c), np.zeros((r * c, c)), np.zeros(c))


@dataclass(frozen=True)
class LayerParams:
    norm1: NormParams
    proj: ProjectionParams
    out_proj: np.ndarray  # (d, C)
    norm2: NormParams
    ffn: FfnParams

    @property
    def heads(self) -> int:
        return self.proj.heads

    @classmethod
    def zeros(cls, c: int, d: int, heads: int = 1, r: int = 4,
              identity_norms: bool = True) -> "LayerParams":
        norm = NormParams.identity(c) if identity_norms else NormParams(np.zeros(c), np.zeros(c))
        z = Matrix.zeros(c, d)
        return cls(norm, ProjectionParams(z, z, z, heads), np.zeros((d, c)), norm,
                   FfnParams.zeros(c, r))


@dataclass(frozen=True)
class StageConfig:
    n_layers: int
    window: int
    k_policy: KPolicy
    heads: int = 1
    embed: int = 16
    include_self: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("a stage needs at least one layer")
        n = self.window ** 2
        hi = n if self.include_self else n - 1
        for k in self.k_policy.values:
            if not 1 <= k <= hi:
                raise ValueError(f"k={k} out of range [1, {hi}] for window {self.window}")
        if self.embed % self.heads:
            raise ValueError(f"embed {self.embed} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class StageParams:
    config: StageConfig
    layers: tuple
    conv: ConvParams


@dataclass(frozen=True)
class ModelParams:
    extract_conv: ConvParams
    stages: tuple
    reconstruct_conv: ConvParams

    def __post_init__(self):
        c = self.extract_conv.c_out
        for i, st in enumerate(self.stages):
            if st.conv.c_in != c or st.conv.c_out != c:
                raise ShapeError(f"stage {i} conv is {st.conv.c_in}->{st.conv.c_out}, expected {c}->{c}")
            for lp in st.layers:
                if lp.proj.C != c or lp.out_proj.shape[1] != c:
                    raise ShapeError(f"stage {i} layer expects {lp.proj.C} channels, model has {c}")
        if self.reconstruct_conv.c_in != c or self.reconstruct_conv.c_out != self.extract_conv.c_in:
            raise ShapeError("reconstructor must map features back to image channels")


def layer_tensors(lp: LayerParams) -> list:
    return [lp.norm1.scale, lp.norm1.shift, lp.proj.w_qry.data, lp.proj.w_key.data,
            lp.proj.w_val.data, lp.out_proj, lp.norm2.scale, lp.norm2.shift,
            lp.ffn.w1, lp.ffn.b1, lp.ffn.w2, lp.ffn.b2]


def layer_from_tensors(heads: int, t: Sequence[np.ndarray]) -> LayerParams:
    return LayerParams(NormParams(t[0], t[1]),
                       ProjectionParams(Matrix(t[2]), Matrix(t[3]), Matrix(t[4]), heads),
                       t[5], NormParams(t[6], t[7]), FfnParams(t[8], t[9], t[10], t[11]))


def flatten(mp: ModelParams) -> list:
    """All parameter arrays in checkpoint order: extractor (kernel, bias);
    per stage, per layer the 12 layer tensors, then the stage conv;
    reconstructor (kernel, bias)."""
    out = [mp.extract_conv.kernel, mp.extract_conv.bias]
    for st in mp.stages:
        for lp in st.layers:
            out.extend(layer_tensors(lp))
        out.extend([st.conv.kernel, st.conv.bias])
    out.extend([mp.reconstruct_conv.kernel, mp.reconstruct_conv.bias])
    return out


def unflatten(template: ModelParams, arrays: Sequence[np.ndarray]) -> ModelParams:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ref = flatten(template)
    if len(arrays) != len(ref):
        raise ShapeError(f"expected {len(ref)} arrays, got {len(arrays)}")
    for i, (a, r) in enumerate(zip(arrays, ref)):
        if a.shape != r.shape:
            raise ShapeError(f"array {i}: shape {a.shape}, expected {r.shape}")
    it = iter(arrays)
    extract = ConvParams(next(it), next(it))
    stages = []
    for st in template.stages:
        layers = tuple(layer_from_tensors(st.config.heads, [next(it) for _ in range(12)])
                       for _ in st.layers)
        stages.append(StageParams(st.config, layers, ConvParams(next(it), next(it))))
    return ModelParams(extract, tuple(stages), ConvParams(next(it), next(it)))


def init_model(rng: RngStream, img_channels: int, channels: int,
               configs: Sequence[StageConfig], ffn_expansion: int = 4,
               zero_init_residual: bool = True) -> ModelParams:
    """Gaussian fan-in initialization.

    With ``zero_init_residual`` the stage convs and the reconstructor start
    at zero, so the untrained model is the identity map.
    """
    def conv(cin, cout, zero=False):
        if zero:
            return ConvParams.zeros(cin, cout)
        return ConvParams(rng.normal((3, 3, cin, cout), math.sqrt(1.0 / (9 * cin))), np.zeros(cout))

    C = channels
    extract = conv(img_channels, C)
    stages = []
    for cfg in configs:
        d, r = cfg.embed, ffn_expansion
        layers = []
        for _ in range(cfg.n_layers):
            proj = ProjectionParams(rng.matrix(C, d, 1 / math.sqrt(C)), rng.matrix(C, d, 1 / math.sqrt(C)),
                                    rng.matrix(C, d, 1 / math.sqrt(C)), cfg.heads)
            ffn = FfnParams(rng.normal((C, r * C), 1 / math.sqrt(C)), np.zeros(r * C),
                            rng.normal((r * C, C), 1 / math.sqrt(r * C)), np.zeros(C))
            layers.append(LayerParams(NormParams.identity(C), proj,
                                      rng.normal((d, C), 1 / math.sqrt(d)),
                                      NormParams.identity(C), ffn))
        stages.append(StageParams(cfg, tuple(layers), conv(C, C, zero_init_residual)))
    return ModelParams(extract, tuple(stages), conv(C, img_channels, zero_init_residual))


def zero_model(img_channels: int, channels: int, configs: Sequence[StageConfig],
               ffn_expansion: int = 4) -> ModelParams:
    stages = tuple(
        StageParams(cfg, tuple(LayerParams.zeros(channels, cfg.embed, cfg.heads, ffn_expansion)
                               for _ in range(cfg.n_layers)),
                    ConvParams.zeros(channels, channels))
        for cfg in configs)
    return ModelParams(ConvParams.zeros(img_channels, channels), stages,
                       ConvParams.zeros(channels, img_channels))


# ---------------------------------------------------------------------------
# elementwise pieces


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def _ln_forward(x, p: NormParams):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * p.scale + p.shift, (xhat, inv)


def _ln_backward(cache, p: NormParams, dy):
    xhat, inv = cache
    flat = (-1, dy.shape[-1])
    d_scale = (dy * xhat).reshape(flat).sum(axis=0)
    d_shift = dy.reshape(flat).sum(axis=0)
    g = dy * p.scale
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, d_scale, d_shift


def _tn(a, b):
    return matmul_tn(a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1]))


def ffn(x: Matrix, p: FfnParams) -> Matrix:
    """Row-wise ``gelu(x W1 + b1) W2 + b2``; the caller adds the residual."""
    if x.cols != p.w1.shape[0]:
        raise ShapeError(f"FFN expects {p.w1.shape[0]} features, got {x.cols}")
    h = gelu(matmul_array(x.data, p.w1) + p.b1)
    return Matrix.wrap(matmul_array(h, p.w2) + p.b2)


# ---------------------------------------------------------------------------
# layer


def _layer_forward(x, neighbors, allowed, lp: LayerParams, variant: str):
    """x: (B, N, C) window-batched tokens. Returns (y, cache)."""
    heads = lp.heads
    h1, ln1 = _ln_forward(x, lp.norm1)
    q = matmul_array(h1, lp.proj.w_qry.data)
    k = matmul_array(h1, lp.proj.w_key.data)
    v = matmul_array(h1, lp.proj.w_val.data)
    if variant == "mask":
        a, probs = _per_window(lambda q_, k_, v_, m_: masked_attention_arrays(q_, k_, v_, m_, heads),
                               q, k, v, allowed)
    elif variant == "gather":
        a = _per_window(lambda q_, k_, v_, n_: gather_attention_arrays(q_, k_, v_, n_, heads),
                        q, k, v, neighbors)
        probs = None
    else:
        raise ValueError(f"unknown attention variant {variant!r}")
    x1 = x + matmul_array(a, lp.out_proj)
    h2, ln2 = _ln_forward(x1, lp.norm2)
    u = matmul_array(h2, lp.ffn.w1) + lp.ffn.b1
    g = gelu(u)
    y = x1 + matmul_array(g, lp.ffn.w2) + lp.ffn.b2
    cache = dict(h1=h1, ln1=ln1, q=q, k=k, v=v, probs=probs, allowed=allowed, a=a,
                 h2=h2, ln2=ln2, u=u, g=g)
    return y, cache


def _layer_backward(cache, lp: LayerParams, dy):
    """Returns (dx, grads in :func:`layer_tensors` order)."""
    heads = lp.heads
    d_w2 = _tn(cache["g"], dy)
    d_b2 = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    du = matmul_array(dy, lp.ffn.w2.T) * gelu_grad(cache["u"])
    d_w1 = _tn(cache["h2"], du)
    d_b1 = du.reshape(-1, du.shape[-1]).sum(axis=0)
    dh2 = matmul_array(du, lp.ffn.w1.T)
    dx1_ln, d_s2, d_sh2 = _ln_backward(cache["ln2"], lp.norm2, dh2)
    dx1 = dy + dx1_ln

    d_wo = _tn(cache["a"], dx1)
    da = matmul_array(dx1, lp.out_proj.T)
    q, k, v = cache["q"], cache["k"], cache["v"]
    probs = cache["probs"]
    if probs is None:
        _, probs = masked_attention_arrays(q, k, v, cache["allowed"], heads)
    dq, dk, dv = _per_window(
        lambda q_, k_, v_, p_, d_: masked_attention_backward_arrays(q_, k_, v_, p_, heads, d_),
        q, k, v, probs, da)
    h1 = cache["h1"]
    wq, wk, wv = lp.proj.w_qry.data, lp.proj.w_key.data, lp.proj.w_val.data
    dh1 = matmul_array(dq, wq.T) + matmul_array(dk, wk.T) + matmul_array(dv, wv.T)
    dx_ln, d_s1, d_sh1 = _ln_backward(cache["ln1"], lp.norm1, dh1)
    grads = [d_s1, d_sh1, _tn(h1, dq), _tn(h1, dk), _tn(h1, dv), d_wo,
             d_s2, d_sh2, d_w1, d_b1, d_w2, d_b2]
    return dx1 + dx_ln, grads


def transformer_layer(tokens: TokenSet, dic: KeySemanticDictionary, lp: LayerParams,
                      variant: str = "mask") -> TokenSet:
    """One window through attention + FFN, both pre-normalized with
    residuals. ``mask`` is the training path, ``gather`` the inference path."""
    x = tokens.tokens
    if dic.N != x.rows:
        raise ShapeError(f"dictionary covers {dic.N} tokens, window has {x.rows}")
    if x.cols != lp.proj.C:
        raise ShapeError(f"layer expects {lp.proj.C} channels, tokens have {x.cols}")
    y, _ = _layer_forward(x.data[None], dic.neighbors[None], dic.allowed_mask()[None],
                          lp, variant)
    return TokenSet(Matrix.wrap(y[0]))


# ---------------------------------------------------------------------------
# stage


def _stage_dictionaries(tokens: np.ndarray, k: int, include_self: bool):
    dicts = [build_dictionary(Matrix.wrap(t), k, include_self) for t in tokens]
    neighbors = np.stack([d.neighbors for d in dicts])
    allowed = np.stack([d.allowed_mask() for d in dicts])
    return dicts, neighbors, allowed


def _stage_forward(x, sp: StageParams, rng, variant: str, k: Optional[int] = None):
    cfg = sp.config
    H, W, _ = x.shape
    if k is None:
        k = sample_k(cfg.k_policy, rng)
    tokens = partition_array(x, cfg.window)
    # built once from the stage input; every layer below reuses it
    dicts, neighbors, allowed = _stage_dictionaries(tokens, k, cfg.include_self)
    caches = []
    t = tokens
    for lp in sp.layers:
        t, c = _layer_forward(t, neighbors, allowed, lp, variant)
        caches.append(c)
    merged = merge_array(t, H, W)
    out = x + conv3x3_array(merged, sp.conv)
    return out, dict(layers=caches, merged=merged, n_windows=tokens.shape[0], k=k,
                     dicts=dicts, shape=(H, W))


def _stage_backward(cache, sp: StageParams, dout):
    H, W = cache["shape"]
    M = sp.config.window
    d_merged, d_kernel, d_bias = conv3x3_backward(cache["merged"], sp.conv, dout)
    dt = merge_backward(d_merged, cache["n_windows"], M)
    layer_grads = []
    for lp, c in zip(reversed(sp.layers), reversed(cache["layers"])):
        dt, g = _layer_backward(c, lp, dt)
        layer_grads.append(g)
    layer_grads.reverse()
    dx = dout + partition_backward(dt, H, W)
    grads = [g for lg in layer_grads for g in lg] + [d_kernel, d_bias]
    return dx, grads


def transformer_stage(f: FeatureMap, cfg: StageConfig, layers: Sequence[LayerParams],
                      conv: ConvParams, rng: Optional[RngStream] = None,
                      variant: str = "mask", k: Optional[int] = None) -> FeatureMap:
    if len(layers) != cfg.n_layers:
        raise ShapeError(f"config wants {cfg.n_layers} layers, got {len(layers)}")
    out, _ = _stage_forward(f.data, StageParams(cfg, tuple(layers), conv), rng, variant, k)
    return FeatureMap(out)


# ---------------------------------------------------------------------------
# model


def _image_array(img) -> np.ndarray:
    return img.data if isinstance(img, FeatureMap) else np.asarray(img, dtype=np.float64)


def _model_forward(x, mp: ModelParams, rng, variant: str, ks=None):
    f = conv3x3_array(x, mp.extract_conv)
    for i, sp in enumerate(mp.stages):
        f, _ = _stage_forward(f, sp, rng, variant, None if ks is None else ks[i])
    return x + conv3x3_array(f, mp.reconstruct_conv)


def model_forward(img: FeatureMap, mp: ModelParams, rng: Optional[RngStream] = None,
                  variant: str = "mask") -> FeatureMap:
    """Extractor conv -> stages -> reconstructor conv, plus the input."""
    if img.C != mp.extract_conv.c_in:
        raise ShapeError(f"model expects {mp.extract_conv.c_in} image channels, got {img.C}")
    return FeatureMap(_model_forward(img.data, mp, rng, variant))


def forward_backward(mp: ModelParams, img, d_loss_fn, rng=None, variant: str = "mask",
                     ks=None):
    """Run the model and backpropagate ``d_loss_fn(out) -> (loss, d_out)``.

    Returns ``(loss, out, grads)``; grads align with :func:`flatten`.
    """
    x = _image_array(img)
    f = conv3x3_array(x, mp.extract_conv)
    stage_caches, used_k = [], []
    for i, sp in enumerate(mp.stages):
        f, c = _stage_forward(f, sp, rng, variant, None if ks is None else ks[i])
        stage_caches.append(c)
        used_k.append(c["k"])
    out = x + conv3x3_array(f, mp.reconstruct_conv)
    loss, d_out = d_loss_fn(out)

    df, d_rk, d_rb = conv3x3_backward(f, mp.reconstruct_conv, d_out)
    stage_grads = []
    for sp, c in zip(reversed(mp.stages), reversed(stage_caches)):
        df, g = _stage_backward(c, sp, df)
        stage_grads.append(g)
    stage_grads.reverse()
    _, d_ek, d_eb = conv3x3_backward(x, mp.extract_conv, df)
    grads = [d_ek, d_eb] + [g for sg in stage_grads for g in sg] + [d_rk, d_rb]
    return loss, out, grads, used_k


def l1_loss(target):
    t = _image_array(target)

    def fn(out):
        diff = out - t
        return float(np.abs(diff).mean()), np.sign(diff) / diff.size
    return fn


def l2_loss(target=None):
    """``0.5 * ||out - target||^2`` (target defaults to zero)."""
    def fn(out):
        diff = out if target is None else out - _image_array(target)
        return 0.5 * float((diff * diff).sum()), diff
    return fn


def train_step(mp: ModelParams, noisy: FeatureMap, clean: FeatureMap, lr: float,
               rng: Optional[RngStream] = None):
    """One full-batch gradient-descent step on the mean absolute error.

    k is drawn once per stage from each stage's policy. Returns
    ``(new_params, loss)`` where loss is measured before the update.
    """
    if noisy.shape != clean.shape:
        raise ShapeError(f"noisy {noisy.shape} vs clean {clean.shape}")
    loss, _, grads, _ = forward_backward(mp, noisy, l1_loss(clean), rng)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}: training diverged")
    if lr == 0:
        return mp, loss
    new = [p - lr * g for p, g in zip(flatten(mp), grads)]
    return unflatten(mp, new), loss


# ---------------------------------------------------------------------------
# checkpoints
#
# Little-endian layout:
#   b"KSEM" | u32 version | u32 n_arrays
#   then per array: u32 ndim | ndim x u32 dims | prod(dims) x f64
# Arrays follow flatten() order. Configs are not stored; loading needs a
# template model with the same structure.

CHECKPOINT_MAGIC = b"KSEM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, mp: ModelParams):
    arrays = flatten(mp)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, template: ModelParams) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arrays = []
    for _ in range(n):
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(blob, "<f8", count, pos).reshape(shape).astype(np.float64))
        pos += 8 * count
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return unflatten(template, arrays)
