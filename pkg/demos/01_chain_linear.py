"""
Chain-of-Linear layers
======================

A hidden vector is cut into chains. Output chain i of a chain layer reads
input chains 1..i only, so the weight matrix is block lower-triangular.
"""
import numpy as np

from colm import sparse
from colm.chain import ChainLinear, ChainSpec, chain_dims, chain_param_count, dense_ratio

# four equal chains over a 16-wide vector
spec = ChainSpec((1, 1, 1, 1))
print("widths:", chain_dims(spec, 16).widths)

# the block mask: rows are output chains, columns input chains
m = sparse.mask_blocks(spec, 16, 16, block_size=4)
print(m.present.astype(int))
print("kept fraction:", m.ratio, "=", dense_ratio(spec))

# at 4096 x 4096 that is 10.5M weights instead of 16.8M
print("4096x4096 params:", chain_param_count(ChainSpec((8, 8, 8, 8)), 4096, 4096))

# perturbing the last chain of the input leaves the first three output chains alone
rng = np.random.default_rng(0)
lin = ChainLinear(spec, 16, 16, rng=rng, std=0.5, dtype=np.float64)
x = rng.standard_normal((2, 16))
xp = x.copy()
xp[:, 12:] += 10.0
diff = np.abs(lin(x).data - lin(xp).data).max(axis=0)
print("per-feature change:", np.round(diff, 3))

# the same layer run through the block-sparse kernel
naive = lin(x).data
lin.backend, lin.block_size = "bcsr", 4
print("bcsr vs naive max diff:", np.abs(lin(x).data - naive).max())
