"""Acceptance criteria 1-11, each printing one PASS/FAIL line.

CLI-backed criteria run the ``keysem`` entry point in-process and keep the
exact JSON bytes it writes, so criterion 11 can compare reruns byte for
byte. Library-backed criteria produce their own JSON summaries for the
same purpose.
"""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from keysem.attention import ProjectionParams, linear_proj, semanir_att_gather, semanir_att_mask
from keysem.cli import main
from keysem.cost_model import (CostInputs, measured_peak, peak_elements_gather,
                               peak_elements_mask, time_msa, time_semanir, time_wmsa)
from keysem.dictionary import build_dictionary, count_constructions
from keysem.gradcheck import random_conv, random_layer
from keysem.patching import (FeatureMap, TokenSet, WindowSet, conv3x3, window_merge,
                             window_partition)
from keysem.stage import Fixed, StageConfig, parallel_windows, transformer_layer, transformer_stage
from keysem.tensor_core import RngStream

DENOISE_FIXED_K = 8


def record(n, name, ok, detail=""):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


class CliRuns:
    """Runs CLI commands once per (argv, threads) and caches bytes + time."""

    def __init__(self, tmp):
        self.tmp = tmp
        self.cache = {}

    def run(self, argv, threads=1, tag="a"):
        key = (tuple(argv), threads, tag)
        if key not in self.cache:
            path = self.tmp / f"report{len(self.cache)}.json"
            t0 = time.perf_counter()
            code = main(list(argv) + ["--threads", str(threads), "--out", str(path)])
            secs = time.perf_counter() - t0
            raw = path.read_bytes()
            self.cache[key] = (code, raw, json.loads(raw), secs)
        return self.cache[key]


@pytest.fixture(scope="module")
def cli(tmp_path_factory):
    return CliRuns(tmp_path_factory.mktemp("acceptance"))


EQUIV = ["equiv", "--seed", "0"]
GRADCHECK = ["gradcheck", "--seed", "0"]
FLOPS = ["flops", "--height", "64", "--width", "64", "--window", "7", "--token-pixels", "256",
         "--k", "512", "--layers", "6"]
BENCH = ["bench", "--seed", "0", "--no-timing"]
DENOISE_RANDOM = ["denoise", "--seed", "42"]
DENOISE_FIXED = ["denoise", "--seed", "42", "--k", str(DENOISE_FIXED_K)]


# ---------------------------------------------------------------------------
# library-backed summaries


def shared_dictionary_summary(threads=1):
    rng = RngStream(4)
    C, k, n_layers = 6, 10, 6
    cfg = StageConfig(n_layers, 4, Fixed(k), heads=2, embed=4)
    layers = [random_layer(rng, C, 4, 2) for _ in range(n_layers)]
    conv = random_conv(rng, C, C)
    f = FeatureMap(rng.normal((12, 10, C)))
    with parallel_windows(threads), count_constructions() as counter:
        once = transformer_stage(f, cfg, layers, conv)
    ws = window_partition(f, 4)
    windows = [w.tokens for w in ws.windows]
    current = list(windows)
    for lp in layers:
        # rebuilt from the stage-input tokens before every layer
        current = [transformer_layer(TokenSet(t), build_dictionary(src, k), lp).tokens
                   for t, src in zip(current, windows)]
    merged = window_merge(WindowSet(4, ws.grid_rows, ws.grid_cols,
                                    [TokenSet(t) for t in current], ws.pad_spec), f.H, f.W)
    rebuilt = FeatureMap(f.data + conv3x3(merged, conv).data)
    return {"bit_identical": once == rebuilt, "constructions": counter.events,
            "windows": len(ws.windows)}


def permutation_summary(threads=1, trials=200):
    rng = RngStream(5)
    worst_attn = worst_layer = 0.0
    with parallel_windows(threads):
        for _ in range(trials):
            N = 4 + rng.integer(29)
            C = 2 + rng.integer(6)
            heads = (1, 2, 4)[rng.integer(3)]
            d = heads * (1 + rng.integer(3))
            k = 1 + rng.integer(N - 1)
            x = rng.matrix(N, C)
            dic = build_dictionary(x, k)
            perm = rng.permutation(N)
            xp, dp = x.take_rows(perm), dic.permuted(perm)
            proj = ProjectionParams(rng.matrix(C, d), rng.matrix(C, d), rng.matrix(C, d), heads)
            for fn in (semanir_att_gather, semanir_att_mask):
                base = fn(*linear_proj(x, proj), dic, heads).tokens.data
                out = fn(*linear_proj(xp, proj), dp, heads).tokens.data
                worst_attn = max(worst_attn, float(np.abs(out - base[perm]).max()))
            lp = random_layer(rng, C, d, heads)
            for variant in ("gather", "mask"):
                base = transformer_layer(TokenSet(x), dic, lp, variant).tokens.data
                out = transformer_layer(TokenSet(xp), dp, lp, variant).tokens.data
                worst_layer = max(worst_layer, float(np.abs(out - base[perm]).max()))
    return {"trials": trials, "max_dev_attention": worst_attn, "max_dev_layer": worst_layer}


def reduction_grid():
    """100 points where the window spans the whole map: H = W = M*t and
    token_pixels = t*t, so M^2 * token_pixels == H*W."""
    points = []
    for M in range(1, 6):
        for t in range(1, 5):
            for C in (1, 3, 8, 16, 64):
                points.append(dict(H=M * t, W=M * t, C=C, M=M, token_pixels=t * t,
                                   heads=1 + (M + t) % 3))
    return points


def reduction_summary():
    rows = []
    for p in reduction_grid():
        full_k = p["M"] ** 2 * p["token_pixels"]
        ci_full = CostInputs(p["H"], p["W"], p["C"], p["M"], full_k, p["heads"], 6,
                             p["token_pixels"])
        rows.append({**p, "semanir_eq_wmsa": time_semanir(ci_full) == time_wmsa(ci_full),
                     "wmsa_eq_msa": time_wmsa(ci_full) == time_msa(ci_full)})
    return {"points": len(rows), "all_equal": all(r["semanir_eq_wmsa"] and r["wmsa_eq_msa"]
                                                  for r in rows), "rows": rows}


def instrumentation_summary():
    rng = RngStream(9)
    rows = []
    for _ in range(20):
        N = 2 + rng.integer(63)
        k = 1 + rng.integer(N - 1)
        heads = (1, 2, 4)[rng.integer(3)]
        d = heads * (1 + rng.integer(8))
        row = {"N": N, "k": k, "d": d, "heads": heads}
        for variant, formula in (("gather", peak_elements_gather), ("mask", peak_elements_mask)):
            row[variant] = [measured_peak(N, k, d, heads, variant, rng),
                            formula(N, k, d, heads)]
        rows.append(row)
    return {"configs": len(rows),
            "all_equal": all(r[v][0] == r[v][1] for r in rows for v in ("gather", "mask")),
            "rows": rows}


LIBRARY_SUMMARIES = {
    4: shared_dictionary_summary,
    5: permutation_summary,
    7: lambda threads=1: reduction_summary(),
    9: lambda threads=1: instrumentation_summary(),
}


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_oracle_equivalence(cli):
    code, _, rep, secs = cli.run(EQUIV)
    o = rep["oracle"]
    ok = code == 0 and o["cases"] == 500 and o["max_dev"] < 1e-9 and secs < 30
    record(1, "sparse (both variants, k=N-1) vs dense oracle", ok,
           f"max_dev={o['max_dev']:.3g} cases={o['cases']} time={secs:.1f}s")


def test_criterion_02_variant_equivalence(cli):
    code, _, rep, secs = cli.run(EQUIV)
    v = rep["variant"]
    ks = {c % 3 for c in range(v["cases"])}
    ok = code == 0 and v["cases"] == 500 and v["max_dev"] < 1e-9 and ks == {0, 1, 2} \
        and secs < 30
    record(2, "gather vs mask, k in {1, N/4, N-1}", ok,
           f"max_dev={v['max_dev']:.3g} time={secs:.1f}s")


def test_criterion_03_gradients(cli):
    code, _, rep, secs = cli.run(GRADCHECK)
    worst = {lvl: r["max_rel_error"] for lvl, r in rep["levels"].items()}
    ok = (code == 0 and set(worst) == {"attention", "layer", "stage", "model"}
          and rep["config"]["cases"] == 50 and rep["config"]["step"] == 1e-5
          and max(worst.values()) < 1e-4 and secs < 90)
    record(3, "finite-difference gradient check, 4 levels x 50 cases", ok,
           " ".join(f"{k}={v:.2g}" for k, v in worst.items()) + f" time={secs:.1f}s")


def test_criterion_04_shared_dictionary():
    s = shared_dictionary_summary()
    ok = s["bit_identical"] and s["constructions"] == s["windows"]
    record(4, "6-layer stage: built once == rebuilt per layer; one build per window", ok,
           f"constructions={s['constructions']} windows={s['windows']}")


def test_criterion_05_permutation_equivariance():
    s = permutation_summary()
    ok = s["max_dev_attention"] <= 1e-12 and s["max_dev_layer"] <= 1e-12
    record(5, "permutation equivariance, 200 permutations", ok,
           f"attention={s['max_dev_attention']:.3g} layer={s['max_dev_layer']:.3g}")


def test_criterion_06_worked_example(cli):
    code, _, rep, _ = cli.run(FLOPS)
    f = rep["stage_diff_factored"]
    ok = (code == 0 and (f["window_term"], f["k_term"], f["map_term"]) == (150528, 6144, 4096)
          and f["per_hwc"] == 140288 and rep["stage_diff"] > 0
          and rep["stage_diff"] == 140288 * f["hwc"])
    record(6, "worked example 150528 - 6144 - 4096 = 140288", ok,
           f"terms=({f['window_term']}, {f['k_term']}, {f['map_term']}) per_hwc={f['per_hwc']}")


def test_criterion_07_reductions():
    s = reduction_summary()
    record(7, "complexity reductions on a 100-point grid", s["points"] == 100 and s["all_equal"],
           f"points={s['points']}")


def test_criterion_08_memory_ordering(cli):
    code, _, rep, secs = cli.run(BENCH)
    o = rep["orderings"]
    n_max = max(p["N"] for p in rep["n_sweep"])
    ok = (code == 0 and o["small_n_gather_exceeds_mask"] and o["large_n_mask_exceeds_gather"]
          and o["k_sweep_mask_spread"] < 0.3 and o["k_sweep_gather_growth"] >= 8
          and n_max <= 4096 and secs < 120)
    record(8, "peak-element orderings over N and k sweeps", ok,
           f"mask_spread={o['k_sweep_mask_spread']:.2f} "
           f"gather_growth={o['k_sweep_gather_growth']:.1f}x time={secs:.1f}s")


def test_criterion_09_instrumentation():
    s = instrumentation_summary()
    record(9, "AllocMeter peaks == analytic peaks on 20 configs",
           s["configs"] == 20 and s["all_equal"], f"configs={s['configs']}")


@pytest.mark.parametrize("argv,label", [(DENOISE_RANDOM, "RandomFrom{4,8,16}"),
                                        (DENOISE_FIXED, f"Fixed({DENOISE_FIXED_K})")])
def test_criterion_10_toy_training(cli, argv, label):
    code, _, rep, secs = cli.run(argv)
    c = rep["config"]
    ok = (code == 0 and rep["ratio"] <= 0.6 and secs < 120 and c["steps"] == 300
          and (c["height"], c["width"], c["stages"], c["layers"], c["channels"],
               c["window"], c["sigma"]) == (32, 32, 2, 2, 16, 8, 25.0))
    record(10, f"toy denoising, {label}", ok,
           f"ratio={rep['ratio']:.3f} time={secs:.1f}s")


CLI_CRITERIA = {"1-2": EQUIV, "3": GRADCHECK, "6": FLOPS, "8": BENCH,
                "10a": DENOISE_RANDOM, "10b": DENOISE_FIXED}


def test_criterion_11_determinism(cli):
    mismatched = []
    for name, argv in CLI_CRITERIA.items():
        first = cli.run(argv, 1, "a")[1]
        again = cli.run(argv, 1, "b")[1]
        threaded = cli.run(argv, 4, "c")[1]
        if not (first == again == threaded):
            mismatched.append(name)
    for n, fn in LIBRARY_SUMMARIES.items():
        runs = [json.dumps(fn(threads=t)).encode() for t in (1, 1, 4)]
        if not runs[0] == runs[1] == runs[2]:
            mismatched.append(str(n))
    record(11, "byte-identical reports across reruns and --threads 1 vs 4", not mismatched,
           f"mismatched={mismatched}" if mismatched else "criteria 1-10 all identical")
