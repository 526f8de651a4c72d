"""Invariant suite: causality, n=1 equivalence, kernels, gradients, expansion, prefill.

Each probe takes a seeded generator, builds a small random instance and
returns ``None`` on success or a string describing the failing instance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import lifecycle as L
from . import sparse
from . import tensor as T
from .chain import (ChainEmbedding, ChainLinear, ChainNorm, ChainSpec, chain_dims, chain_linear_backward,
                    chain_linear_forward, multi_chain_ce)
from .model import ChainAttention, ChainFFN, Colm, ColmConfig, ComMlp
from .reference import DenseTransformer


def rand_spec(rng, n: int, hi: int = 4) -> ChainSpec:
    return ChainSpec(tuple(int(c) for c in rng.integers(1, hi + 1, size=n)))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = float(np.abs(b).max()) if b.size else 0.0
    return float(np.abs(a - b).max()) / max(den, 1e-30) if b.size else 0.0


def tiny_config(spec: ChainSpec, rng=None, kv_sharing: bool = False, head_dim: int = 4, ffn_kind: str | None = None,
                n_layers: int = 2, vocab: int = 23, dtype: str = "float64") -> ColmConfig:
    """Smallest valid CoLM for ``spec``: one query head per base unit."""
    h = spec.total
    if kv_sharing:
        g = 0
        for c in spec.bases:
            g = int(np.gcd(g, c))
        h_kv = g
    else:
        h_kv = h  # c_i * h_kv divisible by sum(C) always holds
    kind = ffn_kind or ("gelu" if rng is None else ("gelu", "swiglu")[int(rng.integers(2))])
    return ColmConfig(dim=h * head_dim, hidden_dim=2 * h * head_dim, n_layers=n_layers, n_head=h, n_kv_head=h_kv,
                      vocab_size=vocab, chains=spec.bases, kv_sharing=kv_sharing, ffn_kind=kind, dtype=dtype)


def _perturb_tail(x: np.ndarray, start: int, rng) -> np.ndarray:
    y = x.copy()
    y[..., start:] += rng.standard_normal(y[..., start:].shape).astype(y.dtype)
    return y


# ---------------------------------------------------------------------------
# Causality
# ---------------------------------------------------------------------------
CAUSALITY_KINDS = ("linear", "norm", "ffn", "attn", "stack", "model")


def causality_probe(rng, n: int, kind: str) -> str | None:
    """Perturb chains >= j of the input; the output prefix of chains < j must be bit-identical."""
    spec = rand_spec(rng, n)
    j = int(rng.integers(2, n + 1)) if n > 1 else 1
    tag = f"kind={kind} spec={spec} j={j}"
    if n == 1:
        return None
    if kind == "model":
        return _model_causality(rng, spec, j, tag)
    D = spec.total * 4
    dims = chain_dims(spec, D)
    cut = dims.width_upto(j - 1)
    x = rng.standard_normal((2, 5, D))
    xp = _perturb_tail(x, cut, rng)
    if kind == "linear":
        lin = ChainLinear(spec, D, spec.total * 3, bias=bool(rng.integers(2)), rng=rng, std=0.5, dtype=np.float64)
        f = lambda z: lin(z).data  # noqa: E731
        out_cut = chain_dims(spec, spec.total * 3).width_upto(j - 1)
    elif kind == "norm":
        nm = ChainNorm(spec, D, ("rmsnorm", "layernorm")[int(rng.integers(2))], dtype=np.float64)
        f = lambda z: nm(z).data  # noqa: E731
        out_cut = cut
    elif kind in ("ffn", "attn"):
        cfg = tiny_config(spec, rng)
        layer = ChainFFN(cfg, rng, std=0.3) if kind == "ffn" else ChainAttention(cfg, rng, std=0.3)
        f = lambda z: layer(T.Tensor(z)).data  # noqa: E731
        out_cut = cut
    elif kind == "stack":
        depth = int(rng.integers(2, 6))
        widths = [D] + [spec.total * int(rng.integers(1, 5)) for _ in range(depth)]
        layers = [ChainLinear(spec, a, b, rng=rng, std=0.5, dtype=np.float64) for a, b in zip(widths, widths[1:])]

        def f(z):
            h = T.Tensor(z)
            for lin in layers:
                h = T.gelu(lin(h))
            return h.data

        out_cut = chain_dims(spec, widths[-1]).width_upto(j - 1)
        tag += f" depth={depth}"
    else:
        raise ValueError(kind)
    a, b = f(x), f(xp)
    if not np.array_equal(a[..., :out_cut], b[..., :out_cut]):
        return tag + " prefix changed"
    return None


def _model_causality(rng, spec, j, tag) -> str | None:
    cfg = tiny_config(spec, rng)
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    tok = rng.integers(0, cfg.vocab_size, (2, 6))
    ha, hb = [], []
    la = m.forward(tok, mode="multi", hidden=ha)
    E = m.embed.tables[j - 1]
    E.data = E.data + rng.standard_normal(E.shape)
    lb = m.forward(tok, mode="multi", hidden=hb)
    cut = m.dims.width_upto(j - 1)
    for layer, (x, y) in enumerate(zip(ha, hb)):
        if not np.array_equal(x.data[..., :cut], y.data[..., :cut]):
            return tag + f" hidden state {layer} prefix changed"
    for i in range(j - 1):
        if not np.array_equal(la[i].data, lb[i].data):
            return tag + f" chain-{i + 1} logits changed"
    return None


def token_causality_probe(rng) -> str | None:
    spec = rand_spec(rng, int(rng.integers(1, 4)))
    cfg = tiny_config(spec, rng, kv_sharing=bool(rng.integers(2)))
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    L_ = 8
    t = int(rng.integers(0, L_ - 1))
    tok = rng.integers(0, cfg.vocab_size, (1, L_))
    tok2 = tok.copy()
    tok2[0, t + 1:] = rng.integers(0, cfg.vocab_size, L_ - t - 1)
    a, b = m(tok).data, m(tok2).data
    if not np.array_equal(a[:, : t + 1], b[:, : t + 1]):
        return f"spec={spec} t={t} earlier logits changed"
    return None


def kv_closure_probe(rng, n: int | None = None) -> str | None:
    """Chain-1 forward of a KV-sharing model reproduces every cache and chain-1 hidden state."""
    n = n or int(rng.integers(2, 5))
    h_kv = int(rng.integers(1, 3))
    spec = ChainSpec(tuple(h_kv * int(c) for c in rng.integers(1, 3, size=n)))
    cfg = tiny_config(spec, rng, kv_sharing=True)
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    tok = rng.integers(0, cfg.vocab_size, (2, 7))
    c1, cn = L.KvCache(cfg.n_layers), L.KvCache(cfg.n_layers)
    h1, hn = [], []
    with T.no_grad():
        f1 = m.features(tok, 1, cache=c1, hidden=h1)
        fn = m.features(tok, n, cache=cn, hidden=hn)
    if not c1.equals(cn):
        return f"spec={spec} kv caches differ"
    d1 = m.dims.width_upto(1)
    for layer, (a, b) in enumerate(zip(h1, hn)):
        if not np.array_equal(a.data, b.data[..., :d1]):
            return f"spec={spec} chain-1 hidden {layer} differs"
    if not np.array_equal(f1.data, fn.data[..., :d1]):
        return f"spec={spec} chain-1 features differ"
    return None


# ---------------------------------------------------------------------------
# Generality
# ---------------------------------------------------------------------------
def generality_probe(rng, dtype: str = "float64") -> float:
    """Max relative deviation of an n=1 CoLM from the dense reference (logits and every gradient)."""
    kv = bool(rng.integers(2))
    h = int(rng.choice([2, 4]))
    cfg = ColmConfig(dim=8 * h, hidden_dim=16 * h, n_layers=2, n_head=h, n_kv_head=h if kv else h // 2,
                     vocab_size=31, chains=(h,), kv_sharing=kv, ffn_kind=("gelu", "swiglu")[int(rng.integers(2))],
                     dtype=dtype)
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    ref = DenseTransformer.from_colm(m)
    tok = rng.integers(0, 31, (2, 9))
    y = rng.integers(0, 31, (2, 9))
    _, l1 = m.loss(tok, y)
    l2 = ref.loss(tok, y)
    err = rel_err(m(tok).data, ref(tok).data)
    g1 = T.backward(l1, accumulate=False)
    g2 = T.backward(l2, accumulate=False)
    err = max(err, rel_err(g1[id(m.embed.tables[0])], g2[id(ref.w["embed"])]))
    for i, blk in enumerate(m.layers):
        pairs = [(blk.attn.wq.weights[0], "wq"), (blk.attn.wo.weights[0], "wo"), (blk.ffn.w1.weights[0], "w1"),
                 (blk.ffn.w2.weights[0], "w2"), (blk.attn_norm.gains[0], "attn_norm")]
        for p, name in pairs:
            err = max(err, rel_err(g1[id(p)], g2[id(ref.w[f"{i}.{name}"])]))
    err = max(err, rel_err(g1[id(m.head.blocks[0])], g2[id(ref.w["head"])]))
    return err


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------
def kernel_probe(rng, n: int | None = None, dtype=np.float32) -> float:
    """Max relative error of the three BCSR paths against the naive chain paths."""
    n = n or int(rng.choice([1, 2, 3, 4, 8]))
    spec = rand_spec(rng, n, 3)
    bs = int(rng.choice([4, 8, 16]))
    mx, my = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    Dx, Dy = spec.total * bs * mx, spec.total * bs * my
    lin = ChainLinear(spec, Dx, Dy, rng=rng, std=1.0, dtype=dtype)
    wd = [w.data for w in lin.weights]
    m = sparse.pack_weights(wd, block_size=bs, spec=spec)
    x = rng.standard_normal((int(rng.integers(1, 40)), Dx)).astype(dtype)
    g = rng.standard_normal((x.shape[0], Dy)).astype(dtype)
    y0 = chain_linear_forward(x, wd)
    gx0, gw0, _ = chain_linear_backward(g, x, wd)
    y1 = sparse.bcsr_forward(x, m, None)
    gx1 = sparse.bcsr_backward_input(g, m, None)
    gw1 = sparse.unpack_weights(m, sparse.bcsr_backward_weight(x, g, m, None))
    errs = [rel_err(y1, y0), rel_err(gx1, gx0)] + [rel_err(a, b) for a, b in zip(gw1, gw0)]
    return max(errs)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def gradient_suite(rng, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference errors (float64) for every layer type and both loss modes."""
    out = {}
    spec = ChainSpec((1, 2))
    D = 6

    def x_in(*shape):
        return T.Tensor(rng.uniform(-2, 2, shape))

    for backend, sp, d in (("naive", spec, D), ("bcsr", ChainSpec((1, 1)), 4)):
        lin = ChainLinear(sp, d, d, bias=True, rng=rng, std=0.5, dtype=np.float64)
        lin.backend, lin.block_size = backend, 2 if backend == "bcsr" else None
        x = x_in(3, d)
        w = T.Tensor(rng.standard_normal((3, d)))
        f = lambda _, lin=lin, x=x, w=w: T.sum_all(T.mul(lin(x), w))  # noqa: E731
        out[f"chain_linear[{backend}].x"] = T.grad_check(f, x, h)
        out[f"chain_linear[{backend}].W"] = max(T.grad_check(f, p, h) for p in lin.weights)
        out[f"chain_linear[{backend}].b"] = max(T.grad_check(f, p, h) for p in lin.biases)
    for kind in ("rmsnorm", "layernorm"):
        nm = ChainNorm(spec, D, kind, dtype=np.float64)
        for g in nm.gains:
            g.data = rng.uniform(0.5, 1.5, g.shape)
        x = x_in(2, 3, D)
        w = T.Tensor(rng.standard_normal((2, 3, D)))
        f = lambda _, nm=nm, x=x, w=w: T.sum_all(T.mul(nm(x), w))  # noqa: E731
        out[f"chain_norm[{kind}]"] = max(T.grad_check(f, p, h) for p in [x, *nm.gains])
    emb = ChainEmbedding(spec, 5, D, rng=rng, std=1.0, dtype=np.float64)
    tok = rng.integers(0, 5, (2, 4))
    w = T.Tensor(rng.standard_normal((2, 4, D)))
    out["embedding"] = max(T.grad_check(lambda _: T.sum_all(T.mul(emb(tok), w)), p, h) for p in emb.tables)
    for name, op in (("gelu", T.gelu), ("silu", T.silu), ("softmax", T.softmax_rows)):
        x = x_in(3, 5)
        w = T.Tensor(rng.standard_normal((3, 5)))
        out[name] = T.grad_check(lambda z, op=op, w=w: T.sum_all(T.mul(op(z), w)), x, h)
    q = x_in(1, 2, 5, 4)
    cos, sin = T.rope_tables(4, np.arange(5), 10000.0, np.float64)
    w = T.Tensor(rng.standard_normal((1, 2, 5, 4)))
    out["rope"] = T.grad_check(lambda z: T.sum_all(T.mul(T.rope(z, cos, sin), w)), q, h)
    q, k, v = x_in(1, 2, 4, 3), x_in(1, 2, 6, 3), x_in(1, 2, 6, 3)
    w = T.Tensor(rng.standard_normal((1, 2, 4, 3)))
    f = lambda _: T.sum_all(T.mul(T.attention(q, k, v, causal=True), w))  # noqa: E731
    out["attention"] = max(T.grad_check(f, t, h) for t in (q, k, v))
    for sharing in (False, True):
        cfg = tiny_config(ChainSpec((2, 2)), kv_sharing=sharing, head_dim=2, ffn_kind="gelu")
        att = ChainAttention(cfg, rng, std=0.4)
        x = x_in(1, 4, cfg.dim)
        w = T.Tensor(rng.standard_normal((1, 4, cfg.dim)))
        f = lambda _, att=att, x=x, w=w: T.sum_all(T.mul(att(x), w))  # noqa: E731
        out[f"chain_attention[{'shared' if sharing else 'gqa'}]"] = max(
            T.grad_check(f, p, h) for p in [x] + att.parameters())
    for kind in ("gelu", "swiglu"):
        cfg = tiny_config(ChainSpec((1, 2)), head_dim=2, ffn_kind=kind)
        ffn = ChainFFN(cfg, rng, std=0.4)
        x = x_in(2, 3, cfg.dim)
        w = T.Tensor(rng.standard_normal((2, 3, cfg.dim)))
        f = lambda _, ffn=ffn, x=x, w=w: T.sum_all(T.mul(ffn(x), w))  # noqa: E731
        out[f"chain_ffn[{kind}]"] = max(T.grad_check(f, p, h) for p in [x] + ffn.parameters())
    dims = chain_dims(spec, D)
    feats = x_in(2, 3, D)
    head = T.Tensor(rng.standard_normal((D, 7)))
    tg = rng.integers(0, 7, (2, 3))
    for mode in ("final", "multi"):
        f = lambda _, mode=mode: multi_chain_ce(feats, head, tg, dims, mode)[1]  # noqa: E731
        out[f"multi_chain_ce[{mode}]"] = max(T.grad_check(f, t, h) for t in (feats, head))
    cfg = tiny_config(ChainSpec((1, 1)), head_dim=2, ffn_kind="swiglu", n_layers=1, vocab=7)
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    for p in m.parameters():
        p.data = p.data * 10.0
    tok = rng.integers(0, 7, (1, 4))
    nxt = rng.integers(0, 7, (1, 4))
    for mode in ("final", "multi"):
        f = lambda _, mode=mode: m.loss(tok, nxt, None, mode)[1]  # noqa: E731
        out[f"colm_loss[{mode}]"] = max(T.grad_check(f, p, h) for p in m.parameters())
    mlp = ComMlp((1, 1), hidden=(4, 4, 2), n_in=6, n_classes=3, seed=1, dtype=np.float64)
    xi = rng.uniform(0, 1, (3, 6))
    yi = rng.integers(0, 3, 3)
    f = lambda _: T.cross_entropy(mlp(xi), yi)  # noqa: E731
    out["com_mlp"] = max(T.grad_check(f, p, h) for p in mlp.parameters())
    return out


def mutation_control(rng, h: float = 1e-5) -> float:
    """Gradient-check error with a deliberately wrong GELU derivative (should be large)."""
    good = T._gelu_grad
    T._gelu_grad = lambda x: good(x) * 1.5 + 0.1
    try:
        x = T.Tensor(rng.uniform(-2, 2, (4, 5)))
        w = T.Tensor(rng.standard_normal((4, 5)))
        return T.grad_check(lambda z: T.sum_all(T.mul(T.gelu(z), w)), x, h)
    finally:
        T._gelu_grad = good


# ---------------------------------------------------------------------------
# Lifecycle
# ---------------------------------------------------------------------------
def expansion_probe(rng) -> str | None:
    spec = rand_spec(rng, int(rng.integers(1, 3)))
    cfg = tiny_config(spec, rng, kv_sharing=bool(rng.integers(2)), dtype="float32")
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    extra = [int(spec.bases[0] * int(rng.integers(1, 3))) for _ in range(int(rng.integers(1, 3)))]
    try:
        big = L.expand_chains(m, extra, seed=int(rng.integers(1 << 30)))
    except Exception as e:  # configuration rejected; not a preservation failure
        return None if isinstance(e, ValueError) else f"spec={spec} +{extra}: {e}"
    tok = rng.integers(0, cfg.vocab_size, (2, 6))
    if not np.array_equal(big(tok).data, m(tok).data):
        return f"spec={spec} +{extra} logits changed after expansion"
    return None


def prefill_probe(rng, length: int = 16) -> str | None:
    spec = ChainSpec(tuple(2 * int(c) for c in rng.integers(1, 3, size=int(rng.integers(2, 5)))))
    cfg = tiny_config(spec, rng, kv_sharing=True, dtype="float32")
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    tok = rng.integers(0, cfg.vocab_size, (1, length))
    if not L.prefill_first_chain(m, tok).equals(L.prefill(m, tok)):
        return f"spec={spec} len={length} prefill caches differ"
    return None


def extraction_probe(rng) -> str | None:
    spec = rand_spec(rng, int(rng.integers(1, 4)))
    cfg = tiny_config(spec, rng, kv_sharing=False, dtype="float32")
    m = Colm(cfg, seed=int(rng.integers(1 << 30)))
    tok = rng.integers(0, cfg.vocab_size, (2, 6))
    for i in range(1, spec.n + 1):
        if not np.array_equal(L.extract_submodel(m, i)(tok).data, m(tok, active=i).data):
            return f"spec={spec} i={i} extracted logits differ"
    return None


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------
@dataclass
class PropertyResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _collect(name, fn, seed, count):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    for inst in range(count):
        msg = fn(rng)
        if msg:
            return PropertyResult(name, False, f"seed={seed} instance={inst}: {msg}", time.perf_counter() - t0)
    return PropertyResult(name, True, f"{count} instances", time.perf_counter() - t0)


def run_selftest(seed: int = 0, scale: int = 1, grad_tol: float = 1e-4) -> list[PropertyResult]:
    res = []
    res.append(_collect("causality", lambda r: causality_probe(
        r, int(r.integers(2, 5)), CAUSALITY_KINDS[int(r.integers(len(CAUSALITY_KINDS)))]), seed, 60 * scale))
    res.append(_collect("causality_n1", lambda r: causality_probe(r, 1, "linear"), seed, 3))
    res.append(_collect("token_causality", token_causality_probe, seed, 5 * scale))
    res.append(_collect("kv_sharing_closure", kv_closure_probe, seed, 5 * scale))

    def gen(r):
        e = generality_probe(r, "float64")
        return None if e == 0.0 else f"n=1 deviates from dense reference by {e:.3g}"

    res.append(_collect("n1_equivalence", gen, seed, 3 * scale))

    def kern(r):
        e = kernel_probe(r)
        return None if e < 1e-5 else f"bcsr deviates from naive by {e:.3g}"

    res.append(_collect("kernel_equivalence", kern, seed, 25 * scale))
    t0 = time.perf_counter()
    errs = gradient_suite(np.random.default_rng(seed))
    bad = {k: v for k, v in errs.items() if not v < grad_tol}
    res.append(PropertyResult("gradient_checks", not bad,
                              f"seed={seed} failing: {bad}" if bad else f"{len(errs)} checks, max err "
                              f"{max(errs.values()):.2e}", time.perf_counter() - t0))
    res.append(_collect("expansion_preserves_logits", expansion_probe, seed, 4 * scale))
    res.append(_collect("extraction_commutes", extraction_probe, seed, 4 * scale))
    res.append(_collect("prefill_cache_equality", prefill_probe, seed, 4 * scale))
    return res


def format_results(results: list[PropertyResult]) -> str:
    lines = [f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.1f}s)" for r in results]
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} properties passed")
    return "\n".join(lines)
