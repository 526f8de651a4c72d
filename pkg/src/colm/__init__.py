"""Chain-of-Model layers, kernels and lifecycle tools on a small numpy autograd engine."""
from .chain import (ChainConfigError, ChainDims, ChainEmbedding, ChainHead, ChainLinear, ChainNorm, ChainSpec,
                    Module, chain_dims, chain_linear, chain_linear_backward, chain_linear_forward, chain_norm,
                    chain_param_count, dense_ratio, embed_lookup, multi_chain_ce)
from .model import (AttnConfig, ChainAttention, ChainFFN, Colm, ColmConfig, ComMlp, KvCache, allocate_heads,
                    com_mlp_param_count, rope_apply)
from .tensor import Tensor, backward, grad_check, no_grad, parameter

__version__ = "0.1.0"
