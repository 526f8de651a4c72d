"""Chain specifications and the chain-structured primitive layers.

A chain spec ``C = (c_1, ..., c_n)`` splits every width ``D`` into per-chain
widths ``D_i = c_i * D / sum(C)``. A chain layer's output chain ``i`` only
reads input chains ``<= i``, so any prefix of chains is a self-contained
smaller network.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ChainConfigError(ValueError):
    """A width or head count that the chain spec cannot split exactly."""


@dataclass(frozen=True)
class ChainSpec:
    bases: tuple[int, ...]

    def __post_init__(self):
        bases = tuple(int(c) for c in self.bases)
        if not bases or any(c < 1 for c in bases):
            raise ChainConfigError(f"chain bases must be a non-empty list of positive ints, got {self.bases!r}")
        object.__setattr__(self, "bases", bases)

    @classmethod
    def of(cls, bases) -> "ChainSpec":
        return bases if isinstance(bases, ChainSpec) else cls(tuple(bases))

    @property
    def n(self) -> int:
        return len(self.bases)

    @property
    def total(self) -> int:
        return sum(self.bases)

    def prefix(self, k: int) -> "ChainSpec":
        return ChainSpec(self.bases[:k])

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.bases)) + "}"


@dataclass(frozen=True)
class ChainDims:
    widths: tuple[int, ...]

    @property
    def prefix(self) -> tuple[int, ...]:
        """Cumulative widths ``P_i``."""
        return tuple(np.cumsum(self.widths).tolist())

    @property
    def total(self) -> int:
        return sum(self.widths)

    @property
    def n(self) -> int:
        return len(self.widths)

    def bounds(self, i: int) -> tuple[int, int]:
        """Half-open feature range of chain ``i`` (1-based)."""
        p = (0,) + self.prefix
        return p[i - 1], p[i]

    def width_upto(self, k: int) -> int:
        return self.prefix[k - 1]


def chain_dims(spec: ChainSpec, D: int) -> ChainDims:
    spec = ChainSpec.of(spec)
    widths = []
    for c in spec.bases:
        if (D * c) % spec.total:
            raise ChainConfigError(f"width {D} cannot be split by chain spec {spec} (c={c}, sum={spec.total})")
        widths.append(D * c // spec.total)
    return ChainDims(tuple(widths))


def check_active(active: int | None, n: int) -> int:
    if active is None:
        return n
    if not 1 <= active <= n:
        raise ValueError(f"active chain count {active} outside [1, {n}]")
    return active


def chain_param_count(spec, Dx: int, Dy: int, biased: bool = False) -> int:
    spec = ChainSpec.of(spec)
    px = chain_dims(spec, Dx).prefix
    dy = chain_dims(spec, Dy).widths
    count = sum(a * b for a, b in zip(dy, px))
    return count + (Dy if biased else 0)


def dense_ratio(spec) -> float:
    """Fraction of a dense weight kept by the step mask."""
    spec = ChainSpec.of(spec)
    cum = np.cumsum(spec.bases)
    return float(sum(c * p for c, p in zip(spec.bases, cum))) / spec.total ** 2


# ---------------------------------------------------------------------------
# Chain-of-Linear, plain numpy forward/backward
# ---------------------------------------------------------------------------
def chain_linear_forward(x: np.ndarray, weights: Sequence[np.ndarray], biases=None,
                         active: int | None = None) -> np.ndarray:
    """Concatenate ``W_i @ x[..., :P_i] + b_i`` over the active chains.

    ``weights[i]`` has shape ``[D_y_i, P_i]``; input prefixes are read off the
    weight shapes.
    """
    active = check_active(active, len(weights))
    need = weights[active - 1].shape[1]
    if x.shape[-1] < need:
        raise ValueError(f"chain_linear: input width {x.shape[-1]} < required prefix {need}")
    outs = []
    for i in range(active):
        w = weights[i]
        y = np.matmul(x[..., : w.shape[1]], w.T)
        if biases is not None and biases[i] is not None:
            y += biases[i]
        outs.append(y)
    return outs[0] if active == 1 else np.concatenate(outs, axis=-1)


def chain_linear_backward(grad_y: np.ndarray, x: np.ndarray, weights: Sequence[np.ndarray],
                          active: int | None = None, biased: bool = False):
    """Return ``(grad_x, [grad_W_i], [grad_b_i] or None)`` for the active chains."""
    active = check_active(active, len(weights))
    out_w = [w.shape[0] for w in weights[:active]]
    if grad_y.shape[-1] != sum(out_w):
        raise ValueError(f"chain_linear_backward: grad width {grad_y.shape[-1]} != {sum(out_w)}")
    gx = np.zeros_like(x)
    x2 = x.reshape(-1, x.shape[-1])
    gws, gbs = [], []
    s = 0
    for i in range(active):
        w = weights[i]
        gi = grad_y[..., s:s + w.shape[0]]
        s += w.shape[0]
        gx[..., : w.shape[1]] += np.matmul(gi, w)
        g2 = gi.reshape(-1, w.shape[0])
        gws.append(g2.T @ x2[:, : w.shape[1]])
        gbs.append(g2.sum(axis=0) if biased else None)
    return gx, gws, (gbs if biased else None)


def chain_linear(x, weights: Sequence[Tensor], biases=None, active: int | None = None,
                 backend: str = "naive", block_size: int | None = None) -> Tensor:
    """Differentiable Chain-of-Linear. ``backend`` picks naive per-chain GEMMs or BCSR."""
    active = check_active(active, len(weights))
    ws = list(weights[:active])
    bs = list(biases[:active]) if biases is not None else None
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    wd = [w.data for w in ws]
    bd = [b.data for b in bs] if bs is not None else None

    if backend == "naive":
        out = chain_linear_forward(xd, wd, bd, active)

        def bw(g):
            gx, gws, gbs = chain_linear_backward(g, xd, wd, active, bs is not None)
            return (gx, *gws, *(gbs or []))
    elif backend == "bcsr":
        from . import sparse

        m = sparse.pack_weights(wd, block_size=block_size)
        full = xd
        xd = xd[..., : m.shape[1]]
        out = sparse.bcsr_forward(xd, m)
        if bd is not None:
            out += np.concatenate(bd)

        def bw(g):
            gx = sparse.bcsr_backward_input(g, m)
            if full.shape[-1] != gx.shape[-1]:
                pad = np.zeros(full.shape[:-1] + (full.shape[-1] - gx.shape[-1],), dtype=gx.dtype)
                gx = np.concatenate([gx, pad], axis=-1)
            gblocks = sparse.bcsr_backward_weight(xd, g, m)
            gws = sparse.unpack_weights(m, gblocks)
            gbs = []
            if bs is not None:
                g2 = g.reshape(-1, g.shape[-1])
                s = 0
                for w in wd:
                    gbs.append(g2[:, s:s + w.shape[0]].sum(axis=0))
                    s += w.shape[0]
            return (gx, *gws, *gbs)
    else:
        raise ValueError(f"unknown chain-linear backend {backend!r}")
    parents = (x, *ws, *(bs or []))
    return T.record("chain_linear", out, parents, bw)


# ---------------------------------------------------------------------------
# Per-chain normalization
# ---------------------------------------------------------------------------
def chain_norm(x, dims: ChainDims, gains: Sequence, kind: str = "rmsnorm", eps: float = 1e-6) -> Tensor:
    """Normalize each chain slice of ``x`` over its own features.

    The number of chains normalized is ``len(gains)``; ``x`` must be exactly
    that prefix wide.
    """
    fwd, bwd = T.NORMS[kind]
    k = len(gains)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.shape[-1] != dims.width_upto(k):
        raise ValueError(f"chain_norm: width {xd.shape[-1]} != chain prefix {dims.width_upto(k)}")
    gd = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in gains]
    outs, saved = [], []
    for i in range(k):
        a, b = dims.bounds(i + 1)
        o, xhat, inv = fwd(xd[..., a:b], gd[i], eps)
        outs.append(o)
        saved.append((xhat, inv))
    out = outs[0] if k == 1 else np.concatenate(outs, axis=-1)

    def bw(g):
        gx = np.empty_like(xd)
        ggs = []
        for i in range(k):
            a, b = dims.bounds(i + 1)
            gxi, ggi = bwd(g[..., a:b], saved[i][0], saved[i][1], gd[i])
            gx[..., a:b] = gxi
            ggs.append(ggi)
        return (gx, *ggs)

    return T.record("chain_norm", out, (x, *gains), bw)


# ---------------------------------------------------------------------------
# Embedding and multi-chain loss
# ---------------------------------------------------------------------------
def embed_lookup(tokens, E, dims: ChainDims, active: int | None = None) -> Tensor:
    """Row gather from ``E[V, D]`` truncated to the first ``active`` chains."""
    active = check_active(active, dims.n)
    rows = T.take_rows(E, tokens)
    return T.prefix(rows, dims.width_upto(active))


def chain_logits(features, head_blocks: Sequence) -> list[Tensor]:
    """Per-chain logits ``W^i x_{<=i}`` accumulated chain by chain.

    ``head_blocks[j]`` is the ``[D_j, V]`` row block of the head for chain j.
    """
    out = []
    s = 0
    acc = None
    for h in head_blocks:
        w = h.shape[0]
        xi = T.getitem(features, (Ellipsis, slice(s, s + w))) if len(head_blocks) > 1 else features
        s += w
        part = T.matmul(xi, h)
        acc = part if acc is None else T.add(acc, part)
        out.append(acc)
    return out


def split_head(W, dims: ChainDims) -> list[Tensor]:
    """Row blocks of a full ``[D, V]`` head tensor."""
    if dims.n == 1:
        return [W]
    return [T.getitem(W, slice(*dims.bounds(i + 1))) for i in range(dims.n)]


def multi_chain_ce(features, head, targets, dims: ChainDims, mode: str = "final"):
    """Cross entropy of every chain prefix head.

    ``head`` is either a full ``[D, V]`` tensor or the list of per-chain row
    blocks. Returns ``(per_chain_losses, combined)``; ``final`` combines as the
    last chain's loss, ``multi`` as the unweighted mean over chains.
    """
    blocks = list(head) if isinstance(head, (list, tuple)) else split_head(head, dims)
    k = len(blocks)
    fd = features.data if isinstance(features, Tensor) else np.asarray(features)
    if fd.shape[-1] != dims.width_upto(k):
        raise ValueError(f"multi_chain_ce: feature width {fd.shape[-1]} != {dims.width_upto(k)}")
    if mode == "final":
        logits = chain_logits(features, blocks)[-1:]
        losses = [T.cross_entropy(logits[0], targets)]
        return losses, losses[0]
    if mode != "multi":
        raise ValueError(f"unknown loss mode {mode!r}")
    losses = [T.cross_entropy(lg, targets) for lg in chain_logits(features, blocks)]
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return losses, T.scale(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------
class Module:
    """Parameter container. Every parameter is tagged with the chain it belongs to."""

    def __init__(self):
        self._params: dict[str, tuple[Tensor, int]] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, t: Tensor, chain: int) -> Tensor:
        t.requires_grad = True
        self._params[name] = (t, chain)
        return t

    def add_module(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, int]]:
        for name, (t, c) in self._params.items():
            yield prefix + name, t, c
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {n: t for n, t, _ in self.named_parameters()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, t in own.items():
            if state[n].shape != t.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {t.shape}")
            t.data = np.array(state[n], dtype=t.dtype, copy=True)

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


class ChainLinear(Module):
    """Chain-of-Linear layer with per-chain weight blocks ``W_i[D_y_i, P^x_i]``."""

    def __init__(self, spec, d_in: int, d_out: int, bias: bool = False, rng=None,
                 std: float = 0.02, dtype=np.float32, full_input: bool = False):
        super().__init__()
        self.spec = ChainSpec.of(spec)
        self.d_in = d_in
        self.out_dims = chain_dims(self.spec, d_out)
        # full_input: every output chain reads the whole (non-chain) input
        self.in_prefix = (d_in,) * self.spec.n if full_input else chain_dims(self.spec, d_in).prefix
        self.backend = "naive"
        self.block_size: int | None = None
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] | None = [] if bias else None
        for i, (dy, px) in enumerate(zip(self.out_dims.widths, self.in_prefix)):
            w = T.Tensor((rng.standard_normal((dy, px)) * std).astype(dtype))
            self.weights.append(self.add_param(f"w.{i}", w, i + 1))
            if bias:
                self.biases.append(self.add_param(f"b.{i}", T.Tensor(np.zeros(dy, dtype=dtype)), i + 1))

    def __call__(self, x, active: int | None = None) -> Tensor:
        return chain_linear(x, self.weights, self.biases, active, self.backend, self.block_size)

    def dense_weight(self) -> np.ndarray:
        """The full ``[D_y, D_x]`` matrix with zeros outside the step mask."""
        W = np.zeros((self.out_dims.total, self.d_in), dtype=self.weights[0].dtype)
        r = 0
        for w in self.weights:
            W[r:r + w.shape[0], : w.shape[1]] = w.data
            r += w.shape[0]
        return W


class ChainNorm(Module):
    def __init__(self, spec, dim: int, kind: str = "rmsnorm", eps: float = 1e-6, dtype=np.float32):
        super().__init__()
        if kind not in T.NORMS:
            raise ValueError(f"unknown norm kind {kind!r}")
        self.spec = ChainSpec.of(spec)
        self.dims = chain_dims(self.spec, dim)
        self.kind = kind
        self.eps = eps
        self.gains = [self.add_param(f"g.{i}", T.Tensor(np.ones(w, dtype=dtype)), i + 1)
                      for i, w in enumerate(self.dims.widths)]

    def __call__(self, x, active: int | None = None) -> Tensor:
        active = check_active(active, self.dims.n)
        return chain_norm(x, self.dims, self.gains[:active], self.kind, self.eps)


class ChainEmbedding(Module):
    """Token embedding stored as per-chain column tables ``E_i[V, D_i]``."""

    def __init__(self, spec, vocab: int, dim: int, rng=None, std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.spec = ChainSpec.of(spec)
        self.dims = chain_dims(self.spec, dim)
        self.vocab = vocab
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tables = [self.add_param(f"e.{i}", T.Tensor((rng.standard_normal((vocab, w)) * std).astype(dtype)), i + 1)
                       for i, w in enumerate(self.dims.widths)]

    def __call__(self, tokens, active: int | None = None) -> Tensor:
        active = check_active(active, self.dims.n)
        return T.concat([T.take_rows(E, tokens) for E in self.tables[:active]], axis=-1)

    def full_table(self) -> np.ndarray:
        return np.concatenate([E.data for E in self.tables], axis=1)


class ChainHead(Module):
    """Classification head stored as per-chain row blocks ``W_i[D_i, V]`` (+ optional bias)."""

    def __init__(self, spec, dim: int, n_out: int, bias: bool = False, rng=None, std: float = 0.02,
                 dtype=np.float32):
        super().__init__()
        self.spec = ChainSpec.of(spec)
        self.dims = chain_dims(self.spec, dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.blocks = [self.add_param(f"w.{i}", T.Tensor((rng.standard_normal((w, n_out)) * std).astype(dtype)), i + 1)
                       for i, w in enumerate(self.dims.widths)]
        self.bias = self.add_param("b", T.Tensor(np.zeros(n_out, dtype=dtype)), 1) if bias else None

    def logits(self, x, active: int | None = None, all_chains: bool = False):
        active = check_active(active, self.dims.n)
        out = chain_logits(x, self.blocks[:active])
        if self.bias is not None:
            out = [T.add(o, self.bias) for o in out]
        return out if all_chains else out[-1]

    def full_weight(self) -> np.ndarray:
        return np.concatenate([b.data for b in self.blocks], axis=0)
