"""Closed-form costs: when does sharing one dictionary per stage pay off?

Run: python3 demos/03_cost_model.py
"""
from keysem import CostInputs, stage_comparison
from keysem.cost_model import time_msa, time_semanir, time_wmsa

# 7x7 windows of 16x16-pixel patches, 512 neighbors, a 64x64 map, six layers.
ci = CostInputs(H=64, W=64, C=64, M=7, k=512, n_layers=6, token_pixels=256)
cmp_ = stage_comparison(ci)
print(f"per-stage saving / HWC = {cmp_.window_term} - {cmp_.k_term} - {cmp_.map_term}"
      f" = {cmp_.per_hwc}")
print(f"MSA {time_msa(ci):,}  W-MSA {time_wmsa(ci):,}  sparse {time_semanir(ci):,} madds/layer")

# The break-even map size for pixel tokens in 8x8 windows with k=16.
for side in (16, 24, 32, 40):
    c = stage_comparison(CostInputs(side, side, 32, 8, 16, n_layers=6))
    print(f"{side}x{side}: saving/HWC = {c.per_hwc:5d} ->",
          "shared dictionary cheaper" if c.stage_diff > 0 else "plain windows cheaper")
