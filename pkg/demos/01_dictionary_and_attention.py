"""Build a key-semantic dictionary for one window and run both sparse
attention realizations over it.

Run: python3 demos/01_dictionary_and_attention.py
"""
from keysem import RngStream, build_dictionary, semanir_att_gather, semanir_att_mask
from keysem.attention import ProjectionParams, dense_attention, linear_proj
from keysem.tensor_core import max_abs_diff

rng = RngStream(0)
tokens = rng.matrix(16, 4)  # one 4x4 window of pixel tokens, 4 channels

# Each token keeps its 5 most similar peers (dot product, self excluded).
dic = build_dictionary(tokens, k=5)
print("first three dictionary rows:")
print("".join(dic.dumps().splitlines(keepends=True)[:3]))

proj = ProjectionParams(rng.matrix(4, 8), rng.matrix(4, 8), rng.matrix(4, 8), heads=2)
Q, K, V = linear_proj(tokens, proj)

gather = semanir_att_gather(Q, K, V, dic, heads=2, return_weights=True)
mask = semanir_att_mask(Q, K, V, dic, heads=2)
print("gather vs mask max |diff|:", max_abs_diff(gather.tokens, mask.tokens))
print("head-0 weights of token 0 over its neighbors:", gather.weights[0, 0].round(3))

# With k = N-1 the sparse result is ordinary attention that skips the diagonal.
full = build_dictionary(tokens, k=15)
print("k=N-1 vs dense (diagonal masked):",
      max_abs_diff(semanir_att_mask(Q, K, V, full, 2).tokens,
                   dense_attention(Q, K, V, 2, mask_diagonal=True).tokens))
