"""A stage partitions the map into windows, builds one dictionary per
window from its input and reuses it in every layer.

Run: python3 demos/02_shared_stage.py
"""
from keysem import (FeatureMap, Fixed, RngStream, StageConfig, count_constructions,
                    parallel_windows, transformer_stage)
from keysem.gradcheck import random_conv, random_layer

rng = RngStream(1)
C = 8
cfg = StageConfig(n_layers=6, window=8, k_policy=Fixed(12), heads=2, embed=8)
layers = [random_layer(rng, C, cfg.embed, cfg.heads) for _ in range(cfg.n_layers)]
conv = random_conv(rng, C, C)
f = FeatureMap(rng.normal((20, 24, C)))  # 20 rows pad to 24: 3x3 windows

with count_constructions() as counter:
    out = transformer_stage(f, cfg, layers, conv)
print(f"input {f}, output {out}")
print("dictionary constructions for six layers:", counter.events)

gather = transformer_stage(f, cfg, layers, conv, variant="gather")
print("mask (training path) vs gather (inference path):",
      float(abs(out.data - gather.data).max()))

with parallel_windows(4):
    print("identical with 4 window threads:", transformer_stage(f, cfg, layers, conv) == out)
