"""What the prefix tokens do inside one cross-attention tuner."""

import torch

from laspa.encoders import Embedding
from laspa.fusion import AttentionConfig, fuse, init_params, prefix_cross_attention, tuner_params

torch.manual_seed(0)
cfg = AttentionConfig(d_model=16, n_heads=4, prefix_len=3)
params = init_params(cfg, seed=0)

e_spk = Embedding(torch.randn(16), "speaker")
e_lng = Embedding(torch.randn(16), "language")

# a fresh tuner has W_o = 0, so each fused output is just its query
spk_lng, lng_spk = fuse(params, e_spk, e_lng, cfg.n_heads)
print("fresh fusion is identity on the query:", torch.equal(spk_lng.values, e_spk.values))

# perturb W_o to see the mixing; the weights are one row per head over
# the 3 prefix slots plus the single token from the other embedding
tuner = tuner_params(params, "pt_spk")
tuner["w_o"] = 0.1 * torch.randn(16, 16)
out, weights = prefix_cross_attention(tuner, e_spk.values, e_lng.values, cfg.n_heads, return_weights=True)
print("attention weights (head x slot):")
print(weights[0].numpy().round(3))
print("row sums:", weights[0].sum(-1).numpy())

# without prefixes there is only one slot, and the block is linear in kv
tuner0 = dict(tuner, p_k=tuner["p_k"][:0], p_v=tuner["p_v"][:0])
out0 = prefix_cross_attention(tuner0, e_spk.values, e_lng.values, cfg.n_heads)
closed = tuner["w_o"] @ (tuner["w_v"] @ e_lng.values) + e_spk.values
print("zero-prefix output matches W_o W_v kv + q:", torch.allclose(out0, closed, atol=1e-6))
