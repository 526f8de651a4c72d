"""
Growing a trained model
=======================

Train a small single-chain byte LM, append a second chain, then train only
the new chain. The original model survives untouched inside the larger one.
Takes about a minute.
"""
import numpy as np

from colm import config as C
from colm import lifecycle as L
from colm import train as TR
from colm.data import ByteText, builtin_corpus

text = ByteText(builtin_corpus(), source="builtin:stdlib")
base = dict(task="lm", optimizer="adamw", lr=3e-3, batch_size=8, seq_len=32, schedule="linear-warmup-cosine",
            warmup=20, log_every=50)
small = {"dim": 64, "hidden_dim": 128, "n_layers": 2, "n_head": 4, "n_kv_head": 4, "vocab_size": 256,
         "chains": [4]}

res = TR.train_lm(C.from_dict({**base, "model": small, "steps": 200}), text)
dense = res.model
print("dense model trained, final loss %.3f" % res.final_loss)

probe = np.random.default_rng(0).integers(0, 256, (2, 32))
big = L.expand_chains(dense, [4], seed=1)
print("after expansion, logits unchanged:", np.array_equal(big(probe).data, dense(probe).data))
print("params %d -> %d" % (dense.num_params(), big.num_params()))

L.save(big, "/tmp/grown.colm")
tune = C.from_dict({**base, "model": {}, "init_from": "/tmp/grown.colm", "freeze_prefix": 1,
                    "loss_mode": "multi", "steps": 100})
res = TR.train_lm(tune, text)
kept = np.array_equal(L.extract_submodel(res.model, 1)(probe).data, dense(probe).data)
print("after 100 steps on chain 2 only, chain-1 model still identical:", kept)
for a in (1, 2):
    print("held-out CE with %d chain(s): %.3f" % (a, TR.eval_lm(res.model, text, 32, a, limit=32)["ce"]))
