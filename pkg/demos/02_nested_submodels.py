"""
One model, several sizes
========================

A chain transformer with n chains contains n working language models. The
first i chains form a standalone model that can be sliced out.
"""
import numpy as np

from colm import lifecycle as L
from colm.model import Colm, ColmConfig

cfg = ColmConfig(dim=64, hidden_dim=128, n_layers=2, n_head=8, n_kv_head=4, vocab_size=256, chains=(2, 2, 4))
model = Colm(cfg, seed=0)
tokens = np.frombuffer(b"chains all the way down", dtype=np.uint8).astype(int)[None]

for i in range(1, model.spec.n + 1):
    sub = L.extract_submodel(model, i)
    same = np.array_equal(sub(tokens).data, model(tokens, active=i).data)
    print(f"chains<= {i}: {sub.num_params():7d} params, dim {sub.cfg.dim:3d}, identical logits: {same}")

# the same arithmetic without allocating anything, at a 2048-wide scale
big = ColmConfig(dim=2048, hidden_dim=8192, n_layers=16, n_head=32, n_kv_head=8, vocab_size=32000,
                 chains=(16, 16), ffn_kind="swiglu")
print("full model  %.3fB" % (L.colm_param_count(big) / 1e9))
print("first chain %.3fB" % (L.colm_param_count(L.prefix_config(big, 1)) / 1e9))
