"""Independent float32 check of single-chain CoLM against a torch transformer."""
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from colm import tensor as T
from colm.model import Colm, ColmConfig
from colm.reference import DenseTransformer


def rope_t(x, theta):
    d = x.shape[-1]
    inv = 1.0 / theta ** (torch.arange(0, d, 2, dtype=torch.float64) / d)
    ang = torch.arange(x.shape[2], dtype=torch.float64)[:, None] * inv[None]
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def torch_forward(cfg, w, tokens):
    def rms(x, g):
        return x * torch.rsqrt((x * x).mean(-1, keepdim=True) + cfg.norm_eps) * g

    x = w["embed"][torch.as_tensor(tokens)]
    B, L = tokens.shape
    d = cfg.head_dim
    rep = cfg.n_head // cfg.n_kv_head
    for i in range(cfg.n_layers):
        h = rms(x, w[f"{i}.attn_norm"])
        q = (h @ w[f"{i}.wq"].T).view(B, L, cfg.n_head, d).transpose(1, 2)
        k = (h @ w[f"{i}.wk"].T).view(B, L, cfg.n_kv_head, d).transpose(1, 2)
        v = (h @ w[f"{i}.wv"].T).view(B, L, cfg.n_kv_head, d).transpose(1, 2)
        q, k = rope_t(q, cfg.rope_theta), rope_t(k, cfg.rope_theta)
        if cfg.kv_sharing:
            k, v = k.repeat(1, rep, 1, 1), v.repeat(1, rep, 1, 1)
        else:
            k, v = k.repeat_interleave(rep, 1), v.repeat_interleave(rep, 1)
        o = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + o.transpose(1, 2).reshape(B, L, -1) @ w[f"{i}.wo"].T
        h = rms(x, w[f"{i}.ffn_norm"])
        if cfg.ffn_kind == "gelu":
            f = F.gelu(h @ w[f"{i}.w1"].T)
        else:
            f = F.silu(h @ w[f"{i}.w1"].T) * (h @ w[f"{i}.w3"].T)
        x = x + f @ w[f"{i}.w2"].T
    return rms(x, w["norm"]) @ w["head"]


@pytest.mark.parametrize("kv", [False, True])
@pytest.mark.parametrize("ffn", ["gelu", "swiglu"])
def test_float32_logits_and_grads_match_torch(kv, ffn):
    cfg = ColmConfig(dim=32, hidden_dim=64, n_layers=2, n_head=8, n_kv_head=2, vocab_size=29, chains=(8,),
                     ffn_kind=ffn, kv_sharing=kv, dtype="float32")
    m = Colm(cfg, seed=11)
    ref = DenseTransformer.from_colm(m)
    w = {k: torch.tensor(v.data, requires_grad=True) for k, v in ref.w.items()}
    rng = np.random.default_rng(0)
    tok = rng.integers(0, 29, (2, 12))
    y = rng.integers(0, 29, (2, 12))
    tl = torch_forward(cfg, w, tok)
    ours = m(tok).data
    assert np.abs(ours - tl.detach().numpy()).max() / np.abs(ours).max() < 1e-5
    F.cross_entropy(tl.reshape(-1, 29), torch.as_tensor(y).reshape(-1)).backward()
    ref_loss = ref.loss(tok, y)
    g = T.backward(ref_loss, ref.params(), accumulate=False)
    for k, p in ref.w.items():
        a, b = g[id(p)], w[k].grad.numpy()
        assert np.abs(a - b).max() / max(np.abs(b).max(), 1e-30) < 1e-5, k
