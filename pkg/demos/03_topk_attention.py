"""Top-K attention masking in feature and geometric space.

Shows the two sparsification modes on a Transformer encoder: keeping the K
largest logits per query vs the K geometrically nearest patches, and the
K = N identity that makes the mask a no-op.
"""

import numpy as np

from lcm import tensor as T
from lcm.encoder import (
    AttentionWeights, EncoderConfig, EncoderWeights, encoder_forward,
    multihead_attention, topk_attention_mask,
)
from lcm.geometry import synth_shape
from lcm.mpm import build_model, embed_patches, patchify_and_mask, positional_encoding, MaskSpec, ModelConfig

rng = np.random.default_rng(0)
n = 16
centers = rng.normal(size=(n, 3))
scores = rng.normal(size=(n, n))

for k in (n, 8, 1):
    mask = topk_attention_mask(centers, k, "GEOMETRY")
    kept = np.isfinite(mask).sum(axis=1)
    print(f"geometry top-{k:>2}: kept {kept.min()}..{kept.max()} entries per row")

probs = T.softmax_rows(T.Tensor(scores + topk_attention_mask(scores, 4, "FEATURE"))).data
print(f"feature top-4 rows: nonzeros per row {np.unique((probs > 0).sum(axis=1)).tolist()}, "
      f"row sums within {np.abs(probs.sum(axis=1) - 1).max():.1e} of 1")

w = AttentionWeights.init(32, 4, rng, dtype=np.float64)
tokens = T.Tensor(rng.normal(size=(n, 32)))
full = multihead_attention(tokens, w).data
masked = multihead_attention(tokens, w, mask=topk_attention_mask(centers, n, "GEOMETRY")).data
print(f"K=N mask is a bitwise no-op: {np.array_equal(full, masked)}")

cfg = EncoderConfig(variant="TRANSFORMER_TOPK_GEOMETRY", n_layers=2, d=32,
                    d_ffn=64, n_heads=4, top_k=4)
enc = EncoderWeights.init(cfg, rng, dtype=np.float64)
out = encoder_forward(tokens, None, centers, enc)
print(f"sparse encoder forward: {out.shape}, finite={np.all(np.isfinite(out.data))}")
