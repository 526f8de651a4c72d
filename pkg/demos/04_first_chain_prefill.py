"""
Prefilling from the first chain
===============================

With KV sharing every key and value comes from chain 1. A prompt can then be
prefilled by running only the first chain; the cache is bit-identical.
"""
import numpy as np

from colm import lifecycle as L
from colm.model import Colm, ColmConfig

cfg = ColmConfig(dim=256, hidden_dim=1024, n_layers=2, n_head=32, n_kv_head=8, vocab_size=256,
                 chains=(8, 8, 8, 8), kv_sharing=True, max_seq_len=4096)
model = Colm(cfg, seed=0)

tok = np.random.default_rng(0).integers(0, 256, (1, 256))
print("caches identical:", L.prefill_first_chain(model, tok).equals(L.prefill(model, tok)))

first, full = L.prefill_flops(model, tok)
print("chain-linear flops, first chain / full: %.3f" % (first / full))

for r in L.bench_prefill(model, [256, 512, 1024], repeats=3):
    print("%5d tokens: full %7.1f ms, first chain %6.1f ms, %.2fx" %
          (r["length"], r["full_ms"], r["first_ms"], r["speedup"]))
