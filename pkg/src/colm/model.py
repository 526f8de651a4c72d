"""Chain transformer (CoLM / CoLM-Air) and the CoM-MLP classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .chain import (ChainConfigError, ChainEmbedding, ChainHead, ChainLinear, ChainNorm, ChainSpec, Module,
                    chain_dims, check_active, multi_chain_ce)
from .tensor import Tensor

_DTYPES = {"float32": np.float32, "float64": np.float64}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AttnConfig:
    n_head: int
    n_kv_head: int
    head_dim: int
    spec: ChainSpec
    kv_sharing: bool = False

    def __post_init__(self):
        spec = ChainSpec.of(self.spec)
        object.__setattr__(self, "spec", spec)
        if spec.total != self.n_head:
            raise ChainConfigError(f"chain bases {spec} must sum to the head count {self.n_head}")
        if self.kv_sharing:
            for c in spec.bases:
                if c % self.n_kv_head:
                    raise ChainConfigError(f"with KV sharing every chain base must be a multiple of "
                                           f"n_kv_head={self.n_kv_head}; got c={c}")
        else:
            if self.n_head % self.n_kv_head:
                raise ChainConfigError(f"n_head={self.n_head} not a multiple of n_kv_head={self.n_kv_head}")
            for c in spec.bases:
                if (c * self.n_kv_head) % spec.total:
                    raise ChainConfigError(f"c={c} times n_kv_head={self.n_kv_head} is not a multiple of "
                                           f"sum(C)={spec.total}")


def allocate_heads(cfg: AttnConfig) -> tuple[list[int], list[int]]:
    """Per-chain (query heads, kv heads)."""
    q = list(cfg.spec.bases)
    if cfg.kv_sharing:
        kv = [cfg.n_kv_head] + [0] * (cfg.spec.n - 1)
    else:
        kv = [c * cfg.n_kv_head // cfg.spec.total for c in cfg.spec.bases]
    return q, kv


@dataclass
class ColmConfig:
    dim: int
    hidden_dim: int
    n_layers: int
    n_head: int
    n_kv_head: int
    vocab_size: int
    chains: tuple = (1,)
    kv_sharing: bool = False
    ffn_kind: str = "gelu"
    norm_kind: str = "rmsnorm"
    max_seq_len: int = 2048
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        self.chains = tuple(int(c) for c in self.chains)
        spec = self.spec
        if self.dim % self.n_head:
            raise ChainConfigError(f"dim={self.dim} not divisible by n_head={self.n_head}")
        chain_dims(spec, self.dim)
        chain_dims(spec, self.hidden_dim)
        if self.ffn_kind not in ("gelu", "swiglu"):
            raise ValueError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.norm_kind not in T.NORMS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        self.attn_config()

    @property
    def spec(self) -> ChainSpec:
        return ChainSpec(self.chains)

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_head

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def attn_config(self) -> AttnConfig:
        return AttnConfig(self.n_head, self.n_kv_head, self.head_dim, self.spec, self.kv_sharing)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chains"] = list(self.chains)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColmConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------
@dataclass
class KvCache:
    """Per-layer keys/values ``[B, kv_heads, seq, head_dim]`` (post-rotary)."""

    n_layers: int
    produced_by: int = 1
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __post_init__(self):
        if not self.keys:
            self.keys = [None] * self.n_layers
            self.values = [None] * self.n_layers

    @property
    def seq_len(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is not None:
            if self.keys[layer].shape[:2] != k.shape[:2] or self.keys[layer].shape[3] != k.shape[3]:
                raise ValueError(f"cache shape {self.keys[layer].shape} incompatible with {k.shape}")
            k = np.concatenate([self.keys[layer], k], axis=2)
            v = np.concatenate([self.values[layer], v], axis=2)
        self.keys[layer], self.values[layer] = k, v
        return k, v

    def equals(self, other: "KvCache") -> bool:
        if self.n_layers != other.n_layers:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.keys + self.values, other.keys + other.values))


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------
def rope_apply(q, k, positions, theta: float = 10000.0):
    """Rotate ``q[B, H, T, d]`` and ``k`` by their absolute ``positions``."""
    qd = q.data if isinstance(q, Tensor) else np.asarray(q)
    cos, sin = T.rope_tables(qd.shape[-1], positions, theta, qd.dtype)
    return T.rope(q, cos, sin), T.rope(k, cos, sin)


class ChainAttention(Module):
    def __init__(self, cfg: ColmConfig, rng, std: float = 0.02, out_std: float | None = None):
        super().__init__()
        self.acfg = cfg.attn_config()
        self.spec = cfg.spec
        self.head_dim = cfg.head_dim
        self.theta = cfg.rope_theta
        self.q_heads, self.kv_heads = allocate_heads(self.acfg)
        dt = cfg.np_dtype
        kv_width = cfg.n_kv_head * cfg.head_dim
        self.wq = self.add_module("wq", ChainLinear(self.spec, cfg.dim, cfg.dim, rng=rng, std=std, dtype=dt))
        if cfg.kv_sharing:
            d1 = chain_dims(self.spec, cfg.dim).widths[0]
            self.wk = self.add_param("wk", Tensor((rng.standard_normal((kv_width, d1)) * std).astype(dt)), 1)
            self.wv = self.add_param("wv", Tensor((rng.standard_normal((kv_width, d1)) * std).astype(dt)), 1)
            self.kv_in = d1
        else:
            self.wk = self.add_module("wk", ChainLinear(self.spec, cfg.dim, kv_width, rng=rng, std=std, dtype=dt))
            self.wv = self.add_module("wv", ChainLinear(self.spec, cfg.dim, kv_width, rng=rng, std=std, dtype=dt))
        self.wo = self.add_module("wo", ChainLinear(self.spec, cfg.dim, cfg.dim, rng=rng,
                                                    std=out_std if out_std is not None else std, dtype=dt))

    def linears(self) -> list[ChainLinear]:
        out = [self.wq, self.wo]
        if not self.acfg.kv_sharing:
            out += [self.wk, self.wv]
        return out

    def project_kv(self, x, active: int):
        """Keys and values ``[B, T, H_kv_active * d]`` for the active chains."""
        if self.acfg.kv_sharing:
            x1 = T.prefix(x, self.kv_in)
            return T.linear(x1, self.wk), T.linear(x1, self.wv)
        return self.wk(x, active), self.wv(x, active)

    def __call__(self, x, active: int | None = None, start_pos: int = 0, cache: KvCache | None = None,
                 layer: int = 0) -> Tensor:
        active = check_active(active, self.spec.n)
        B, L = x.shape[0], x.shape[1]
        d = self.head_dim
        hq = sum(self.q_heads[:active])
        hkv = sum(self.kv_heads[:active])
        q = T.transpose(T.reshape(self.wq(x, active), (B, L, hq, d)), (0, 2, 1, 3))
        kx, vx = self.project_kv(x, active)
        k = T.transpose(T.reshape(kx, (B, L, hkv, d)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(vx, (B, L, hkv, d)), (0, 2, 1, 3))
        q, k = rope_apply(q, k, np.arange(start_pos, start_pos + L), self.theta)
        if cache is not None:
            kd, vd = cache.append(layer, k.data, v.data)
            if kd.shape[2] != L:
                k, v = Tensor(kd), Tensor(vd)
        n_rep = hq // hkv
        # sharing tiles kv heads (head j -> j mod h_kv); plain GQA groups them
        k = T.repeat_heads(k, n_rep, interleave=not self.acfg.kv_sharing)
        v = T.repeat_heads(v, n_rep, interleave=not self.acfg.kv_sharing)
        o = T.attention(q, k, v, causal=True)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, L, hq * d))
        return self.wo(o, active)


class ChainFFN(Module):
    def __init__(self, cfg: ColmConfig, rng, std: float = 0.02, out_std: float | None = None):
        super().__init__()
        self.kind = cfg.ffn_kind
        dt = cfg.np_dtype
        spec = cfg.spec
        self.w1 = self.add_module("w1", ChainLinear(spec, cfg.dim, cfg.hidden_dim, rng=rng, std=std, dtype=dt))
        self.w2 = self.add_module("w2", ChainLinear(spec, cfg.hidden_dim, cfg.dim, rng=rng,
                                                    std=out_std if out_std is not None else std, dtype=dt))
        if self.kind == "swiglu":
            self.w3 = self.add_module("w3", ChainLinear(spec, cfg.dim, cfg.hidden_dim, rng=rng, std=std, dtype=dt))

    def linears(self) -> list[ChainLinear]:
        return [self.w1, self.w2] + ([self.w3] if self.kind == "swiglu" else [])

    def __call__(self, x, active: int | None = None) -> Tensor:
        if self.kind == "gelu":
            return self.w2(T.gelu(self.w1(x, active)), active)
        return self.w2(T.mul(T.silu(self.w1(x, active)), self.w3(x, active)), active)


def chain_ffn(x, ffn: ChainFFN, active: int | None = None) -> Tensor:
    return ffn(x, active)


class Block(Module):
    def __init__(self, cfg: ColmConfig, rng):
        super().__init__()
        out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        dt = cfg.np_dtype
        self.attn_norm = self.add_module("attn_norm", ChainNorm(cfg.spec, cfg.dim, cfg.norm_kind, cfg.norm_eps, dt))
        self.attn = self.add_module("attn", ChainAttention(cfg, rng, out_std=out_std))
        self.ffn_norm = self.add_module("ffn_norm", ChainNorm(cfg.spec, cfg.dim, cfg.norm_kind, cfg.norm_eps, dt))
        self.ffn = self.add_module("ffn", ChainFFN(cfg, rng, out_std=out_std))

    def __call__(self, x, active, start_pos=0, cache=None, layer=0):
        h = T.add(x, self.attn(self.attn_norm(x, active), active, start_pos, cache, layer))
        return T.add(h, self.ffn(self.ffn_norm(h, active), active))


class Colm(Module):
    """Chain-of-Language-Model; ``kv_sharing=True`` gives the -Air variant."""

    def __init__(self, cfg: ColmConfig, seed: int = 0, rng=None):
        super().__init__()
        self.cfg = cfg
        self.spec = cfg.spec
        self.dims = chain_dims(self.spec, cfg.dim)
        rng = rng if rng is not None else np.random.default_rng(seed)
        dt = cfg.np_dtype
        self.embed = self.add_module("embed", ChainEmbedding(self.spec, cfg.vocab_size, cfg.dim, rng, dtype=dt))
        self.layers = [self.add_module(f"layers.{i}", Block(cfg, rng)) for i in range(cfg.n_layers)]
        self.norm = self.add_module("norm", ChainNorm(self.spec, cfg.dim, cfg.norm_kind, cfg.norm_eps, dt))
        self.head = self.add_module("head", ChainHead(self.spec, cfg.dim, cfg.vocab_size, rng=rng, dtype=dt))

    @property
    def n_chains(self) -> int:
        return self.spec.n

    def linears(self) -> list[ChainLinear]:
        out = []
        for b in self.layers:
            out += b.attn.linears() + b.ffn.linears()
        return out

    def set_backend(self, backend: str, block_size: int | None = None) -> None:
        for lin in self.linears():
            lin.backend = backend
            lin.block_size = block_size

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id outside [0, {self.cfg.vocab_size})")
        return tokens

    def features(self, tokens, active: int | None = None, start_pos: int = 0, cache: KvCache | None = None,
                 hidden: list | None = None, n_layers: int | None = None) -> Tensor:
        """Final normalized features ``[B, T, P_active]``."""
        active = check_active(active, self.spec.n)
        tokens = self._check_tokens(tokens)
        x = self.embed(tokens, active)
        if hidden is not None:
            hidden.append(x)
        for i, block in enumerate(self.layers[:n_layers]):
            x = block(x, active, start_pos, cache, i)
            if hidden is not None:
                hidden.append(x)
        return self.norm(x, active)

    def forward(self, tokens, active: int | None = None, mode: str = "final", start_pos: int = 0,
                cache: KvCache | None = None, hidden: list | None = None):
        """Logits of the active prefix; ``mode='multi'`` returns one logit tensor per chain head."""
        active = check_active(active, self.spec.n)
        f = self.features(tokens, active, start_pos, cache, hidden)
        return self.head.logits(f, active, all_chains=(mode == "multi"))

    __call__ = forward

    def loss(self, tokens, targets, active: int | None = None, mode: str = "final"):
        active = check_active(active, self.spec.n)
        f = self.features(tokens, active)
        return multi_chain_ce(f, self.head.blocks[:active], targets, self.dims, mode)


def colm_forward(tokens, model: Colm, active: int | None = None, mode: str = "final"):
    return model.forward(tokens, active, mode)


# ---------------------------------------------------------------------------
# CoM-MLP
# ---------------------------------------------------------------------------
CIFAR_HIDDEN = (768, 1024, 512, 256)


class ComMlp(Module):
    """MLP classifier whose hidden layers are Chain-of-Linear.

    The input projection maps the flat image to every chain (each output chain
    reads the whole image), hidden layers are chain layers, and the classifier
    is a prefix-rows head (``head='prefix'``) or a plain dense layer
    (``head='dense'``). With a single chain the network is an ordinary MLP.
    """

    def __init__(self, chains=(1,), hidden=CIFAR_HIDDEN, n_in: int = 3072, n_classes: int = 10,
                 hidden_bias: bool | None = None, activation: str = "relu", head: str = "prefix",
                 seed: int = 0, dtype=np.float32):
        super().__init__()
        self.spec = ChainSpec.of(tuple(chains))
        self.n_in = n_in
        self.hidden = tuple(hidden)
        self.activation = activation
        self.head_kind = head
        if hidden_bias is None:
            hidden_bias = self.spec.n == 1
        self.hidden_bias = bool(hidden_bias)
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return (rng.uniform(-bound, bound, shape)).astype(dtype)

        self.proj = self.add_module("proj", ChainLinear(self.spec, n_in, hidden[0], bias=True, dtype=dtype,
                                                        full_input=True))
        for w, bb in zip(self.proj.weights, self.proj.biases):
            w.data = uniform(w.shape, n_in)
            bb.data = uniform(bb.shape, n_in)
        self.layers: list[ChainLinear] = []
        for j, (a, b) in enumerate(zip(hidden[:-1], hidden[1:])):
            lin = self.add_module(f"hidden.{j}", ChainLinear(self.spec, a, b, bias=hidden_bias, dtype=dtype))
            for w in lin.weights:
                w.data = uniform(w.shape, a)
            if hidden_bias:
                for bb in lin.biases:
                    bb.data = uniform(bb.shape, a)
            self.layers.append(lin)
        last = hidden[-1]
        if head == "prefix":
            self.out = self.add_module("out", ChainHead(self.spec, last, n_classes, bias=True, dtype=dtype))
            for blk in self.out.blocks:
                blk.data = uniform(blk.shape, last)
            self.out.bias.data = uniform((n_classes,), last)
        elif head == "dense":
            self.out_w = self.add_param("out.w", Tensor(uniform((n_classes, last), last)), self.spec.n)
            self.out_b = self.add_param("out.b", Tensor(uniform((n_classes,), last)), self.spec.n)
        else:
            raise ValueError(f"unknown head kind {head!r}")

    def _act(self, x):
        return T.elementwise(self.activation, x)

    def forward(self, images, active: int | None = None, all_chains: bool = False):
        active = check_active(active, self.spec.n)
        xd = images.data if isinstance(images, Tensor) else np.asarray(images)
        if xd.shape[-1] != self.n_in:
            raise ValueError(f"expected {self.n_in}-wide flattened images, got {xd.shape[-1]}")
        h = self._act(self.proj(images, active))
        for lin in self.layers:
            h = self._act(lin(h, active))
        if self.head_kind == "prefix":
            return self.out.logits(h, active, all_chains)
        if active != self.spec.n:
            raise ValueError("a dense classifier head only supports the full chain count")
        return T.linear(h, self.out_w, self.out_b)

    __call__ = forward


def com_mlp_forward(images, model: ComMlp, active: int | None = None) -> Tensor:
    return model.forward(images, active)


def com_mlp_param_count(chains, hidden=CIFAR_HIDDEN, n_in: int = 3072, n_classes: int = 10,
                        hidden_bias: bool | None = None) -> int:
    """Analytic parameter count of :class:`ComMlp` (no allocation)."""
    from .chain import chain_param_count

    spec = ChainSpec.of(tuple(chains))
    if hidden_bias is None:
        hidden_bias = spec.n == 1
    chain_dims(spec, hidden[0])
    total = n_in * hidden[0] + hidden[0]
    for a, b in zip(hidden[:-1], hidden[1:]):
        total += chain_param_count(spec, a, b, hidden_bias)
    return total + hidden[-1] * n_classes + n_classes
