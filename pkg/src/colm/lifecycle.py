"""Checkpoints, chain expansion, chain tuning masks, sub-model extraction and prefilling.

Checkpoint layout (single file)::

    b"COLM1" | manifest length (uint64 LE) | manifest (UTF-8 JSON) | blobs

Blobs are raw little-endian tensors in manifest order. Every tensor entry
records its offset relative to the start of the blob section.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainConfigError, ChainSpec, Module, chain_dims, chain_param_count, check_active
from .model import Colm, ColmConfig, ComMlp, KvCache
from .tensor import no_grad

MAGIC = b"COLM1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated or incompatible checkpoint file."""


# ---------------------------------------------------------------------------
# Model description helpers
# ---------------------------------------------------------------------------
def model_config(model: Module) -> tuple[str, dict]:
    if isinstance(model, Colm):
        return "colm", model.cfg.to_dict()
    if isinstance(model, ComMlp):
        return "com_mlp", {"chains": list(model.spec.bases), "hidden": list(model.hidden), "n_in": model.n_in,
                           "n_classes": int(model.n_classes), "hidden_bias": model.hidden_bias,
                           "activation": model.activation, "head": model.head_kind,
                           "dtype": np.dtype(model.dtype).name}
    raise TypeError(f"unsupported model type {type(model).__name__}")


def build_model(kind: str, config: dict, seed: int = 0) -> Module:
    if kind == "colm":
        return Colm(ColmConfig.from_dict(config), seed=seed)
    if kind == "com_mlp":
        cfg = dict(config)
        dtype = np.dtype(cfg.pop("dtype", "float32")).type
        return ComMlp(seed=seed, dtype=dtype, **cfg)
    raise CheckpointError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------
@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    chains: dict[str, int]
    frozen: dict[str, bool] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Module, frozen: dict[str, bool] | None = None, extra: dict | None = None):
        kind, cfg = model_config(model)
        tensors, chains = {}, {}
        for name, t, c in model.named_parameters():
            tensors[name] = np.array(t.data, copy=True)
            chains[name] = c
        frozen = dict(frozen) if frozen else {n: False for n in tensors}
        return cls(kind, cfg, tensors, chains, frozen, dict(extra or {}))

    def to_model(self) -> Module:
        model = build_model(self.kind, self.config)
        for name, t, c in model.named_parameters():
            if name not in self.tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if self.tensors[name].shape != t.shape:
                raise CheckpointError(f"{name}: stored extent {self.tensors[name].shape} does not match "
                                      f"the manifest config ({t.shape})")
        model.load_state_dict(self.tensors)
        return model

    def manifest(self) -> tuple[dict, list[bytes]]:
        entries, blobs = [], []
        offset = 0
        for name, arr in self.tensors.items():
            le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            raw = le.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset,
                            "nbytes": len(raw), "chain": int(self.chains.get(name, 1)),
                            "frozen": bool(self.frozen.get(name, False))})
            blobs.append(raw)
            offset += len(raw)
        man = {"format_version": self.version, "kind": self.kind, "config": self.config, "tensors": entries,
               "extra": self.extra}
        return man, blobs

    def num_params(self) -> int:
        return sum(a.size for a in self.tensors.values())


def save(obj, path, frozen: dict[str, bool] | None = None, extra: dict | None = None) -> Checkpoint:
    """Write a model or :class:`Checkpoint` to ``path`` and return the checkpoint."""
    ckpt = obj if isinstance(obj, Checkpoint) else Checkpoint.from_model(obj, frozen, extra)
    man, blobs = ckpt.manifest()
    text = json.dumps(man, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(text).to_bytes(8, "little"))
        f.write(text)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return ckpt


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, not a COLM1 checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    n = int.from_bytes(raw[pos:pos + 8], "little")
    pos += 8
    if len(raw) < pos + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        man = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    pos += n
    try:
        version = man["format_version"]
        entries = man["tensors"]
        kind, config = man["kind"], man["config"]
    except (KeyError, TypeError):
        raise CheckpointError(f"{path}: manifest misses required fields") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    tensors, chains, frozen = {}, {}, {}
    for e in entries:
        start = pos + e["offset"]
        end = start + e["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw[start:end], dtype=dt)
        if arr.size != math.prod(e["shape"]):
            raise CheckpointError(f"{path}: blob size of {e['name']} does not match its shape")
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
        chains[e["name"]] = e.get("chain", 1)
        frozen[e["name"]] = e.get("frozen", False)
    return Checkpoint(kind, config, tensors, chains, frozen, man.get("extra", {}), version)


def load_model(path) -> Module:
    return load(path).to_model()


# ---------------------------------------------------------------------------
# Chain tuning
# ---------------------------------------------------------------------------
@dataclass
class FreezeMask:
    k: int
    trainable: dict[str, bool]

    def trainable_params(self, model: Module) -> list:
        return [t for name, t, _ in model.named_parameters() if self.trainable[name]]

    def frozen_names(self) -> list[str]:
        return [n for n, ok in self.trainable.items() if not ok]


def freeze_prefix(model: Module, k: int) -> FreezeMask:
    """Mark every parameter owned by chains ``<= k`` as non-trainable."""
    n = model.spec.n
    if not 0 <= k <= n:
        raise ValueError(f"freeze prefix {k} outside [0, {n}]")
    return FreezeMask(k, {name: c > k for name, _, c in model.named_parameters()})


# ---------------------------------------------------------------------------
# Elastic extraction
# ---------------------------------------------------------------------------
def _prefix_config(model: Module, i: int) -> dict:
    kind, cfg = model_config(model)
    spec = model.spec
    sub = spec.prefix(i)
    if kind == "colm":
        c = model.cfg
        cfg = dict(cfg)
        cfg["chains"] = list(sub.bases)
        cfg["dim"] = chain_dims(spec, c.dim).width_upto(i)
        cfg["hidden_dim"] = chain_dims(spec, c.hidden_dim).width_upto(i)
        cfg["n_head"] = sub.total
        if not c.kv_sharing:
            cfg["n_kv_head"] = sum(cc * c.n_kv_head // spec.total for cc in sub.bases)
    else:
        cfg = dict(cfg)
        cfg["chains"] = list(sub.bases)
        cfg["hidden"] = [chain_dims(spec, h).width_upto(i) for h in model.hidden]
    return cfg


def extract_submodel(model: Module, i: int) -> Module:
    """Standalone model made of the parameters of chains ``<= i``."""
    i = check_active(i, model.spec.n)
    kind, _ = model_config(model)
    if kind == "com_mlp" and model.head_kind == "dense" and i != model.spec.n:
        raise ValueError("a dense classifier head cannot be sliced to a chain prefix")
    sub = build_model(kind, _prefix_config(model, i))
    state = {name: np.array(t.data, copy=True) for name, t, c in model.named_parameters() if c <= i}
    sub.load_state_dict(state)
    return sub


# ---------------------------------------------------------------------------
# Chain expansion
# ---------------------------------------------------------------------------
def expanded_config(cfg: ColmConfig, new_bases) -> ColmConfig:
    new_bases = [int(c) for c in new_bases]
    old = cfg.spec
    spec = ChainSpec(old.bases + tuple(new_bases))
    num, den = spec.total, old.total

    def scale(v, what):
        if (v * num) % den:
            raise ChainConfigError(f"cannot expand {what}={v} from {old} to {spec}: not an integral width")
        return v * num // den

    d = cfg.to_dict()
    d["chains"] = list(spec.bases)
    d["dim"] = scale(cfg.dim, "dim")
    d["hidden_dim"] = scale(cfg.hidden_dim, "hidden_dim")
    d["n_head"] = spec.total
    if not cfg.kv_sharing:
        d["n_kv_head"] = scale(cfg.n_kv_head, "n_kv_head")
    new = ColmConfig.from_dict(d)
    if new.head_dim != cfg.head_dim:
        raise ChainConfigError("expansion must preserve head_dim")
    return new


def expand_chains(model: Colm, new_bases, seed: int = 0) -> Colm:
    """Append chains to a trained model; its logits are unchanged at step 0.

    The trained model becomes the leading chains. New blocks get fresh init,
    new norm gains are one and the new classification-head rows are zero.
    """
    if isinstance(model, Checkpoint):
        return Checkpoint.from_model(expand_chains(model.to_model(), new_bases, seed))
    if not isinstance(model, Colm):
        raise TypeError("chain expansion is implemented for Colm models")
    if not list(new_bases):
        return extract_submodel(model, model.spec.n)
    cfg = expanded_config(model.cfg, new_bases)
    big = Colm(cfg, seed=seed)
    old = {name: t.data for name, t, _ in model.named_parameters()}
    for name, t, c in big.named_parameters():
        if name in old:
            if old[name].shape != t.shape:
                raise ChainConfigError(f"{name}: donor block {old[name].shape} does not fit {t.shape}")
            t.data = np.array(old[name], copy=True)
        elif name.startswith("head."):
            t.data = np.zeros_like(t.data)
    return big


def expansion_param_delta(cfg: ColmConfig, new_bases) -> int:
    return colm_param_count(expanded_config(cfg, new_bases)) - colm_param_count(cfg)


def colm_param_count(cfg: ColmConfig) -> int:
    """Analytic parameter count of a :class:`Colm` config."""
    spec = cfg.spec
    kv = cfg.n_kv_head * cfg.head_dim
    per = 2 * chain_param_count(spec, cfg.dim, cfg.dim)
    if cfg.kv_sharing:
        per += 2 * kv * chain_dims(spec, cfg.dim).widths[0]
    else:
        per += 2 * chain_param_count(spec, cfg.dim, kv)
    per += chain_param_count(spec, cfg.dim, cfg.hidden_dim) * (3 if cfg.ffn_kind == "swiglu" else 2)
    per += 2 * cfg.dim
    return cfg.n_layers * per + 2 * cfg.vocab_size * cfg.dim + cfg.dim


def prefix_config(cfg: ColmConfig, i: int) -> ColmConfig:
    spec = cfg.spec
    d = cfg.to_dict()
    sub = spec.prefix(i)
    d["chains"] = list(sub.bases)
    d["dim"] = chain_dims(spec, cfg.dim).width_upto(i)
    d["hidden_dim"] = chain_dims(spec, cfg.hidden_dim).width_upto(i)
    d["n_head"] = sub.total
    if not cfg.kv_sharing:
        d["n_kv_head"] = sum(c * cfg.n_kv_head // spec.total for c in sub.bases)
    return ColmConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Prefilling
# ---------------------------------------------------------------------------
def prefill(model: Colm, tokens, active: int | None = None) -> KvCache:
    """Populate a KV cache by running the layers at ``active`` chains."""
    active = check_active(active, model.spec.n)
    cache = KvCache(model.cfg.n_layers, produced_by=active)
    with no_grad():
        model.features(tokens, active, cache=cache)
    return cache


def prefill_first_chain(model: Colm, tokens) -> KvCache:
    """KV cache of a KV-sharing model computed from the first chain alone."""
    if not model.cfg.kv_sharing:
        raise ValueError("first-chain prefilling needs a KV-sharing (CoLM-Air) model")
    return prefill(model, tokens, 1)


MAX_PREFILL_TOKENS = 16384


def prefill_flops(model: Colm, tokens) -> tuple[int, int]:
    """Chain-linear flops of (first-chain, full) prefill, counted by the BCSR kernels."""
    from . import sparse

    saved = [(lin.backend, lin.block_size) for lin in model.linears()]
    model.set_backend("bcsr")
    try:
        counts = []
        for active in (1, model.spec.n):
            sparse.flop_counter.reset()
            prefill(model, tokens, active)
            counts.append(sparse.flop_counter.flops)
    finally:
        for lin, (b, bs) in zip(model.linears(), saved):
            lin.backend, lin.block_size = b, bs
    return counts[0], counts[1]


def bench_prefill(model: Colm, lengths, repeats: int = 3, seed: int = 0, batch: int = 1,
                  max_tokens: int = MAX_PREFILL_TOKENS) -> list[dict]:
    """Median wall-clock of full vs first-chain prefill; caches are compared before timing."""
    import time

    if not model.cfg.kv_sharing:
        raise ValueError("bench-prefill needs a KV-sharing (CoLM-Air) checkpoint")
    rng = np.random.default_rng(seed)
    out = []
    for n in lengths:
        n = int(n)
        if n < 1 or n * batch > max_tokens:
            raise ValueError(f"prefill length {n} x batch {batch} outside [1, {max_tokens}] tokens")
        tok = rng.integers(0, model.cfg.vocab_size, (batch, n))
        full, first = prefill(model, tok), prefill_first_chain(model, tok)
        if not full.equals(first):
            raise AssertionError(f"length {n}: first-chain cache differs from full cache")
        times = {"full": [], "first": []}
        for _ in range(repeats):
            for kind, fn in (("full", prefill), ("first", lambda m, t: prefill(m, t, 1))):
                t0 = time.perf_counter()
                fn(model, tok)
                times[kind].append(time.perf_counter() - t0)
        f_ms = 1e3 * float(np.median(times["full"]))
        c_ms = 1e3 * float(np.median(times["first"]))
        out.append({"length": n, "full_ms": f_ms, "first_ms": c_ms, "speedup": f_ms / c_ms, "cache_equal": True})
    return out


def cast_model(model: Module, dtype: str) -> Module:
    """Copy of ``model`` with every tensor converted to ``dtype``."""
    kind, cfg = model_config(model)
    cfg = dict(cfg, dtype=np.dtype(dtype).name)
    new = build_model(kind, cfg)
    new.load_state_dict({n: t.data.astype(dtype) for n, t, _ in model.named_parameters()})
    return new
