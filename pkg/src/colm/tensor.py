"""Dense tensors with reverse-mode gradients.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
operation executed while gradient recording is enabled appends a node to the
graph; :func:`backward` replays those nodes in exact reverse execution order.

Only the operation set needed by the chain models is provided. Fused ops
(attention, normalization, rotary embedding, cross entropy) carry hand-written
backward passes, all of which are checked against central differences in the
test-suite.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = (np.float32, np.float64)

_grad_enabled = contextvars.ContextVar("colm_grad_enabled", default=True)
_seq = itertools.count()


class Node:
    """One executed operation: its inputs and the closure computing input grads."""

    __slots__ = ("seq", "name", "parents", "backward_fn")

    def __init__(self, name: str, parents: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {name}")


def record(name: str, out: np.ndarray, parents: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as the result of op ``name``.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent,
    each with that parent's shape. Parents that are not tensors are constants.
    """
    _check_finite(name, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    needs = _grad_enabled.get() and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    t.requires_grad = needs
    if needs:
        t.node = Node(name, tuple(parents), backward_fn)
    return t


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------
class Tape:
    """The executed operations reachable from a scalar loss, in execution order."""

    def __init__(self, loss: Tensor):
        nodes: dict[int, tuple[Node, Tensor]] = {}
        stack = [loss]
        seen: set[int] = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is None:
                continue
            nodes[t.node.seq] = (t.node, t)
            stack.extend(p for p in t.node.parents if isinstance(p, Tensor) and p.requires_grad)
        self.entries = [nodes[k] for k in sorted(nodes)]

    def __len__(self) -> int:
        return len(self.entries)

    def op_names(self) -> list[str]:
        return [n.name for n, _ in self.entries]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, accumulate: bool = True) -> dict:
    """Back-propagate from a scalar ``loss``.

    Returns a map from tensor identity to gradient for every leaf that
    requires grad (and every tensor in ``wrt``, zero if unused). When
    ``accumulate`` is set the gradients are also added into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt) if wrt is not None else []
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        tape = Tape(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node, out in reversed(tape.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise RuntimeError(f"{node.name}: gradient shape {pg.shape} != {p.shape}")
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
                if p.node is None:
                    leaves[k] = p
    result = {}
    for k, leaf in leaves.items():
        result[k] = grads[k]
    for t in wrt:
        if id(t) not in result:
            result[id(t)] = grads.get(id(t), np.zeros_like(t.data))
    if accumulate:
        for k, leaf in leaves.items():
            g = grads[k].astype(leaf.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    for sa, sb in zip(a.shape[::-1], b.shape[::-1]):
        if sa != sb and sa != 1 and sb != 1:
            raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a[..., M, K]`` and either ``b[K, N]`` or ``b[..., K, N]``."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner extents differ {ad.shape} x {bd.shape}")
    if ad.dtype != bd.dtype:
        raise TypeError(f"matmul: dtype mismatch {ad.dtype} vs {bd.dtype}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if isinstance(a, Tensor) and a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if isinstance(b, Tensor) and b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return record("matmul", out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """Dense layer ``x @ w.T + b`` with ``w`` stored as ``[out, in]``."""
    xd, wd = _data(x), _data(w)
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: input width {xd.shape[-1]} != weight in-extent {wd.shape[1]}")
    out = np.matmul(xd, wd.T)
    if b is not None:
        out += _data(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, wd) if isinstance(x, Tensor) and x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return record("linear", out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd, "add")
    out = ad + bd
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd, "sub")
    out = ad - bd
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd, "mul")
    out = ad * bd
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c: float) -> Tensor:
    xd = _data(x)
    c = xd.dtype.type(c)
    return record("scale", xd * c, (x,), lambda g: (g * c,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    xd = _data(x)
    out = _gelu(xd).astype(xd.dtype, copy=False)
    return record("gelu", out, (x,), lambda g: ((g * _gelu_grad(xd)).astype(xd.dtype, copy=False),))


def silu(x) -> Tensor:
    xd = _data(x)
    s = _sigmoid(xd)
    out = xd * s
    return record("silu", out, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def relu(x) -> Tensor:
    xd = _data(x)
    mask = xd > 0
    return record("relu", np.where(mask, xd, xd.dtype.type(0)), (x,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "gelu": gelu, "silu": silu, "relu": relu}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Reductions and softmax
# ---------------------------------------------------------------------------
def sum_all(x) -> Tensor:
    xd = _data(x)
    return record("sum", np.asarray(xd.sum(), dtype=xd.dtype), (x,),
                  lambda g: (np.broadcast_to(g, xd.shape).copy(),))


def mean_all(x) -> Tensor:
    xd = _data(x)
    n = xd.size
    return record("mean", np.asarray(xd.mean(), dtype=xd.dtype), (x,),
                  lambda g: (np.full(xd.shape, g / n, dtype=xd.dtype),))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows(x) -> Tensor:
    xd = _data(x)
    if xd.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    p = _softmax(xd)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (x,), bw)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets) -> Tensor:
    """Mean token cross entropy of ``logits[..., V]`` against integer ``targets[...]``."""
    ld = _data(logits)
    t = np.asarray(targets)
    V = ld.shape[-1]
    if t.shape != ld.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {t.shape} do not match logits {ld.shape}")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ValueError(f"cross_entropy: target id outside [0, {V})")
    l2 = ld.reshape(-1, V)
    t1 = t.reshape(-1)
    logp = _log_softmax(l2)
    n = t1.size
    loss = -logp[np.arange(n), t1].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t1] -= 1.0
        return ((p * (g / n)).reshape(ld.shape).astype(ld.dtype, copy=False),)

    return record("cross_entropy", np.asarray(loss, dtype=ld.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------
def reshape(x, shape) -> Tensor:
    xd = _data(x)
    out = xd.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(xd.shape),))


def transpose(x, axes=None) -> Tensor:
    xd = _data(x)
    if axes is None:
        axes = tuple(range(xd.ndim))[::-1]
    inv = np.argsort(axes)
    out = np.ascontiguousarray(xd.transpose(axes))
    return record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/int) indexing; the result is a copy so it never aliases ``x``."""
    xd = _data(x)
    out = np.array(xd[idx], copy=True)

    def bw(g):
        gx = np.zeros_like(xd)
        gx[idx] = g
        return (gx,)

    return record("getitem", out, (x,), bw)


def prefix(x, width: int) -> Tensor:
    """The first ``width`` features along the last axis."""
    xd = _data(x)
    if width == xd.shape[-1]:
        return x if isinstance(x, Tensor) else Tensor(xd)
    return getitem(x, (Ellipsis, slice(0, width)))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    if len(xs) == 1:
        return xs[0] if isinstance(xs[0], Tensor) else Tensor(xs[0])
    ds = [_data(x) for x in xs]
    out = np.concatenate(ds, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in ds])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(xs), bw)


def take_rows(table, ids) -> Tensor:
    """Gather rows ``table[ids]`` (embedding lookup)."""
    td = _data(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise IndexError(f"token id outside [0, {td.shape[0]})")
    out = td[ids]

    def bw(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return record("take_rows", out, (table,), bw)


def repeat_heads(x, n_rep: int, interleave: bool) -> Tensor:
    """Repeat the head axis (axis 1 of ``[B, H, T, d]``) ``n_rep`` times.

    ``interleave=True`` gives ``[h0, h0, h1, h1, ...]`` (grouped-query layout);
    ``False`` tiles ``[h0, h1, ..., h0, h1, ...]``.
    """
    xd = _data(x)
    if n_rep == 1:
        return x if isinstance(x, Tensor) else Tensor(xd)
    B, H = xd.shape[:2]
    rest = xd.shape[2:]
    if interleave:
        out = np.repeat(xd, n_rep, axis=1)

        def bw(g):
            return (g.reshape(B, H, n_rep, *rest).sum(axis=2),)
    else:
        out = np.tile(xd, (1, n_rep) + (1,) * len(rest))

        def bw(g):
            return (g.reshape(B, n_rep, H, *rest).sum(axis=1),)

    return record("repeat_heads", out, (x,), bw)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------
def rms_forward(x: np.ndarray, gain: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * inv
    return xhat * gain, xhat, inv


def rms_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    gg = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gh = g * gain
    gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return gx, gg


def layer_forward(x: np.ndarray, gain: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain, xhat, inv


def layer_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    gg = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gh = g * gain
    gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return gx, gg


NORMS = {"rmsnorm": (rms_forward, rms_backward), "layernorm": (layer_forward, layer_backward)}


def norm(x, gain, kind: str = "rmsnorm", eps: float = 1e-6) -> Tensor:
    """Whole-vector normalization over the last axis with a learned gain."""
    fwd, bwd = NORMS[kind]
    xd, gd = _data(x), _data(gain)
    if gd.shape != (xd.shape[-1],):
        raise ValueError(f"norm: gain shape {gd.shape} does not match width {xd.shape[-1]}")
    out, xhat, inv = fwd(xd, gd, eps)
    return record(kind, out, (x, gain), lambda g: bwd(g, xhat, inv, gd))


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    return norm(x, gain, "rmsnorm", eps)


def layer_norm(x, gain, eps: float = 1e-6) -> Tensor:
    return norm(x, gain, "layernorm", eps)


# ---------------------------------------------------------------------------
# Rotary embedding and attention
# ---------------------------------------------------------------------------
def rope_tables(head_dim: int, positions, theta: float = 10000.0, dtype=np.float64):
    """cos/sin tables ``[T, head_dim // 2]`` for integer ``positions``."""
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {head_dim}")
    freqs = 1.0 / theta ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(np.asarray(positions, dtype=np.float64), freqs)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs of ``x[B, H, T, d]`` by per-position angles."""
    xd = _data(x)
    if xd.shape[-1] % 2:
        raise ValueError("rotary embedding needs an even head_dim")
    cos = cos.astype(xd.dtype, copy=False)
    sin = sin.astype(xd.dtype, copy=False)
    out = _rotate(xd, cos, sin)
    return record("rope", out, (x,), lambda g: (_rotate(g, cos, -sin),))


def attention_scores_chunked(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool,
                             block: int = 256) -> np.ndarray:
    """Forward-only causal attention processed in query blocks (bounded memory)."""
    B, H, T, d = q.shape
    S = k.shape[2]
    off = S - T
    sc = q.dtype.type(1.0 / math.sqrt(d))
    out = np.empty_like(q)
    kt = np.swapaxes(k, -1, -2)
    for s in range(0, T, block):
        e = min(T, s + block)
        kmax = off + e if causal else S
        scores = np.matmul(q[:, :, s:e], kt[..., :kmax])
        scores *= sc
        if causal:
            qpos = np.arange(s, e)[:, None] + off
            scores[..., np.arange(kmax)[None, :] > qpos] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[:, :, s:e] = np.matmul(scores, v[:, :, :kmax])
    return out


def attention(q, k, v, causal: bool = True) -> Tensor:
    """Scaled dot-product attention with materialized scores.

    ``q[B, H, T, d]`` attends to ``k, v[B, H, S, d]`` with ``S >= T``; query t
    sits at absolute position ``S - T + t``.
    """
    qd, kd, vd = _data(q), _data(k), _data(v)
    B, H, T, d = qd.shape
    if kd.shape[:2] != (B, H) or kd.shape != vd.shape or kd.shape[-1] != d:
        raise ValueError(f"attention: shape mismatch q{qd.shape} k{kd.shape} v{vd.shape}")
    S = kd.shape[2]
    if S < T:
        raise ValueError("attention: fewer keys than queries")
    needs = _grad_enabled.get() and any(isinstance(t, Tensor) and t.requires_grad for t in (q, k, v))
    if not needs:
        return record("attention", attention_scores_chunked(qd, kd, vd, causal), (q, k, v), None)
    sc = qd.dtype.type(1.0 / math.sqrt(d))
    scores = np.matmul(qd, np.swapaxes(kd, -1, -2)) * sc
    if causal:
        mask = np.arange(S)[None, :] > (np.arange(T)[:, None] + (S - T))
        scores[..., mask] = -np.inf
    p = _softmax(scores)
    out = np.matmul(p, vd)

    def bw(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(vd, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= sc
        gq = np.matmul(gs, kd)
        gk = np.matmul(np.swapaxes(gs, -1, -2), qd)
        return gq, gk, gv

    return record("attention", out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------
def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x.data`` is restored)."""
    flat = x.data.reshape(-1)
    g = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(x).data)
            flat[i] = old - h
            fm = float(f(x).data)
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``x`` must be float64. Raises ``FloatingPointError`` when any evaluation is
    non-finite.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 input")
    was = x.requires_grad
    x.requires_grad = True
    try:
        loss = f(x)
        if loss.data.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        analytic = backward(loss, wrt=[x], accumulate=False)[id(x)]
    finally:
        x.requires_grad = was
    numeric = numerical_grad(f, x, h)
    _check_finite("grad_check", numeric)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
