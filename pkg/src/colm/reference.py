"""Plain dense transformer on the tensor engine, used as the n=1 oracle."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import Colm, ColmConfig


class DenseTransformer:
    """Pre-norm decoder with grouped-query attention, written without any chain machinery."""

    def __init__(self, cfg: ColmConfig, weights: dict[str, np.ndarray]):
        self.cfg = cfg
        self.w = {k: T.parameter(v) for k, v in weights.items()}

    @classmethod
    def from_colm(cls, model: Colm) -> "DenseTransformer":
        if model.spec.n != 1:
            raise ValueError("the dense reference only mirrors single-chain models")
        w = {"embed": model.embed.full_table(), "norm": model.norm.gains[0].data,
             "head": model.head.full_weight()}
        for i, blk in enumerate(model.layers):
            a, f = blk.attn, blk.ffn
            w[f"{i}.attn_norm"] = blk.attn_norm.gains[0].data
            w[f"{i}.ffn_norm"] = blk.ffn_norm.gains[0].data
            w[f"{i}.wq"] = a.wq.dense_weight()
            w[f"{i}.wo"] = a.wo.dense_weight()
            if model.cfg.kv_sharing:
                w[f"{i}.wk"], w[f"{i}.wv"] = a.wk.data, a.wv.data
            else:
                w[f"{i}.wk"], w[f"{i}.wv"] = a.wk.dense_weight(), a.wv.dense_weight()
            w[f"{i}.w1"] = f.w1.dense_weight()
            w[f"{i}.w2"] = f.w2.dense_weight()
            if f.kind == "swiglu":
                w[f"{i}.w3"] = f.w3.dense_weight()
        return cls(model.cfg, {k: np.array(v, copy=True) for k, v in w.items()})

    def params(self):
        return list(self.w.values())

    def _attn(self, x, i):
        c = self.cfg
        B, L, _ = x.shape
        d = c.head_dim
        w = self.w
        q = T.transpose(T.reshape(T.linear(x, w[f"{i}.wq"]), (B, L, c.n_head, d)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(T.linear(x, w[f"{i}.wk"]), (B, L, c.n_kv_head, d)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(T.linear(x, w[f"{i}.wv"]), (B, L, c.n_kv_head, d)), (0, 2, 1, 3))
        cos, sin = T.rope_tables(d, np.arange(L), c.rope_theta, x.data.dtype)
        q, k = T.rope(q, cos, sin), T.rope(k, cos, sin)
        rep = c.n_head // c.n_kv_head
        k = T.repeat_heads(k, rep, interleave=not c.kv_sharing)
        v = T.repeat_heads(v, rep, interleave=not c.kv_sharing)
        o = T.attention(q, k, v, causal=True)
        return T.linear(T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, L, c.n_head * d)), w[f"{i}.wo"])

    def _ffn(self, x, i):
        w = self.w
        if self.cfg.ffn_kind == "gelu":
            return T.linear(T.gelu(T.linear(x, w[f"{i}.w1"])), w[f"{i}.w2"])
        return T.linear(T.mul(T.silu(T.linear(x, w[f"{i}.w1"])), T.linear(x, w[f"{i}.w3"])), w[f"{i}.w2"])

    def forward(self, tokens):
        c = self.cfg
        tokens = np.atleast_2d(np.asarray(tokens))
        x = T.take_rows(self.w["embed"], tokens)
        for i in range(c.n_layers):
            x = T.add(x, self._attn(T.norm(x, self.w[f"{i}.attn_norm"], c.norm_kind, c.norm_eps), i))
            x = T.add(x, self._ffn(T.norm(x, self.w[f"{i}.ffn_norm"], c.norm_kind, c.norm_eps), i))
        x = T.norm(x, self.w["norm"], c.norm_kind, c.norm_eps)
        return T.matmul(x, self.w["head"])

    __call__ = forward

    def loss(self, tokens, targets):
        return T.cross_entropy(self.forward(tokens), targets)


def dense_mlp_forward(x, layers, activation: str = "relu"):
    """``layers`` is a list of ``(W[out, in], b or None)``; activation between layers."""
    h = x
    for j, (w, b) in enumerate(layers):
        h = T.linear(h, w, b)
        if j < len(layers) - 1:
            h = T.elementwise(activation, h)
    return h
