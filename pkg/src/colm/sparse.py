"""Block-compressed-sparse-row storage of Chain-of-Linear weights.

The step mask keeps block ``(r, c)`` iff output block-row ``r`` belongs to a
chain whose input prefix covers block-column ``c``. Only those blocks are
stored and only those blocks are multiplied.

On CPU the kernels walk block-rows (block-columns for the input gradient) and
fuse consecutive rows that share the same column pattern into one panel GEMM;
each output element is still reduced in a single fixed order, so results are
deterministic.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainConfigError, ChainSpec, chain_dims, chain_linear_forward

DEFAULT_BLOCK = 64


class FlopCounter:
    """Counts multiply-add flops issued by the kernels (2 per MAC)."""

    def __init__(self):
        self.flops = 0

    def reset(self) -> None:
        self.flops = 0

    def add(self, n: int) -> None:
        self.flops += int(n)


flop_counter = FlopCounter()


def choose_block_size(widths, preferred: int = DEFAULT_BLOCK) -> int:
    """``preferred`` if it divides every width, else the largest power of two that does."""
    widths = [int(w) for w in widths]
    if all(w % preferred == 0 for w in widths):
        return preferred
    g = 0
    for w in widths:
        g = math.gcd(g, w)
    return math.gcd(g, preferred) if g else 1


@dataclass
class StepMask:
    present: np.ndarray  # bool [block rows, block cols]
    block_size: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.present.shape

    @property
    def count(self) -> int:
        return int(self.present.sum())

    @property
    def ratio(self) -> float:
        return self.count / self.present.size

    def contains(self, r: int, c: int) -> bool:
        return bool(self.present[r, c])

    def blocks(self) -> list[tuple[int, int]]:
        return [tuple(rc) for rc in np.argwhere(self.present).tolist()]


def _mask_from_widths(out_widths, in_prefix, block_size: int, d_in: int) -> StepMask:
    for w in list(out_widths) + list(in_prefix):
        if w % block_size:
            raise ChainConfigError(f"block size {block_size} does not divide chain width {w}")
    if d_in % block_size:
        raise ChainConfigError(f"block size {block_size} does not divide input width {d_in}")
    nbr = sum(out_widths) // block_size
    nbc = d_in // block_size
    present = np.zeros((nbr, nbc), dtype=bool)
    r = 0
    for dy, px in zip(out_widths, in_prefix):
        present[r:r + dy // block_size, : px // block_size] = True
        r += dy // block_size
    return StepMask(present, block_size)


def mask_blocks(spec, Dx: int, Dy: int, block_size: int = DEFAULT_BLOCK) -> StepMask:
    spec = ChainSpec.of(spec)
    dx, dy = chain_dims(spec, Dx), chain_dims(spec, Dy)
    for w in dx.widths + dy.widths:
        if w % block_size:
            raise ChainConfigError(f"block size {block_size} does not divide chain width {w}")
    return _mask_from_widths(dy.widths, dx.prefix, block_size, Dx)


@dataclass
class StepBcsrMatrix:
    block_size: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray  # [nnz, bs, bs]
    shape: tuple[int, int]  # (Dy, Dx)
    chain_rows: tuple[int, ...]  # output width of each chain
    chain_cols: tuple[int, ...]  # input prefix of each chain
    spec: ChainSpec | None = None
    _row_groups: list | None = field(default=None, repr=False)
    _col_groups: list | None = field(default=None, repr=False)

    @property
    def nnz_blocks(self) -> int:
        return len(self.col_idx)

    @property
    def n_block_rows(self) -> int:
        return len(self.row_ptr) - 1

    @property
    def n_block_cols(self) -> int:
        return self.shape[1] // self.block_size

    def mask(self) -> StepMask:
        present = np.zeros((self.n_block_rows, self.n_block_cols), dtype=bool)
        for r in range(self.n_block_rows):
            present[r, self.col_idx[self.row_ptr[r]:self.row_ptr[r + 1]]] = True
        return StepMask(present, self.block_size)

    def row_groups(self) -> list[tuple[int, int, np.ndarray, int]]:
        """Runs ``(r0, r1, cols, first_block)`` of block-rows with identical columns."""
        if self._row_groups is None:
            groups = []
            r = 0
            nbr = self.n_block_rows
            while r < nbr:
                cols = self.col_idx[self.row_ptr[r]:self.row_ptr[r + 1]]
                r1 = r + 1
                while r1 < nbr and np.array_equal(self.col_idx[self.row_ptr[r1]:self.row_ptr[r1 + 1]], cols):
                    r1 += 1
                groups.append((r, r1, cols.copy(), int(self.row_ptr[r])))
                r = r1
            self._row_groups = groups
        return self._row_groups

    def col_groups(self) -> list[tuple[int, int, np.ndarray, np.ndarray]]:
        """Transposed view: runs ``(c0, c1, rows, block_ids[len(rows), c1-c0])``."""
        if self._col_groups is None:
            nbc = self.n_block_cols
            ids = -np.ones((self.n_block_rows, nbc), dtype=np.int64)
            for r in range(self.n_block_rows):
                s, e = self.row_ptr[r], self.row_ptr[r + 1]
                ids[r, self.col_idx[s:e]] = np.arange(s, e)
            groups = []
            c = 0
            while c < nbc:
                rows = np.flatnonzero(ids[:, c] >= 0)
                c1 = c + 1
                while c1 < nbc and np.array_equal(np.flatnonzero(ids[:, c1] >= 0), rows):
                    c1 += 1
                groups.append((c, c1, rows, ids[np.ix_(rows, np.arange(c, c1))]))
                c = c1
            self._col_groups = groups
        return self._col_groups

    def to_bytes(self) -> bytes:
        """Deterministic serialization (structure then little-endian block data)."""
        buf = io.BytesIO()
        header = np.array([self.block_size, *self.shape, len(self.row_ptr), len(self.col_idx)], dtype="<i8")
        buf.write(header.tobytes())
        buf.write(self.row_ptr.astype("<i8").tobytes())
        buf.write(self.col_idx.astype("<i8").tobytes())
        buf.write(self.blocks.astype(self.blocks.dtype.newbyteorder("<")).tobytes())
        return buf.getvalue()


def pack_weights(weights, block_size: int | None = None, spec: ChainSpec | None = None) -> StepBcsrMatrix:
    """Pack per-chain weight blocks ``W_i[D_y_i, P_i]`` into BCSR."""
    weights = [np.asarray(w) for w in weights]
    out_w = tuple(w.shape[0] for w in weights)
    in_p = tuple(w.shape[1] for w in weights)
    d_in = in_p[-1]
    in_widths = np.diff((0,) + in_p)
    if block_size is None:
        block_size = choose_block_size(list(out_w) + list(in_widths))
    mask = _mask_from_widths(out_w, in_p, block_size, d_in)
    bs = block_size
    nbr = mask.grid[0]
    counts = mask.present.sum(axis=1)
    row_ptr = np.zeros(nbr + 1, dtype=np.int64)
    row_ptr[1:] = np.cumsum(counts)
    col_idx = np.concatenate([np.flatnonzero(mask.present[r]) for r in range(nbr)]).astype(np.int64)
    dtype = weights[0].dtype
    blocks = np.empty((len(col_idx), bs, bs), dtype=dtype)
    r = 0
    for w in weights:
        nr, nb = w.shape[0] // bs, w.shape[1] // bs
        start = row_ptr[r]
        blocks[start:start + nr * nb] = w.reshape(nr, bs, nb, bs).transpose(0, 2, 1, 3).reshape(-1, bs, bs)
        r += nr
    return StepBcsrMatrix(bs, row_ptr, col_idx, blocks, (sum(out_w), d_in), out_w, in_p, spec)


def pack(layer, block_size: int | None = None) -> StepBcsrMatrix:
    """Pack a :class:`~colm.chain.ChainLinear` (bias is kept outside the kernel)."""
    return pack_weights([w.data for w in layer.weights], block_size, layer.spec)


def unpack(m: StepBcsrMatrix, blocks: np.ndarray | None = None) -> np.ndarray:
    """Dense ``[Dy, Dx]`` matrix, zero outside the step mask."""
    blocks = m.blocks if blocks is None else blocks
    bs = m.block_size
    W = np.zeros(m.shape, dtype=blocks.dtype)
    for r in range(m.n_block_rows):
        for p in range(m.row_ptr[r], m.row_ptr[r + 1]):
            c = m.col_idx[p]
            W[r * bs:(r + 1) * bs, c * bs:(c + 1) * bs] = blocks[p]
    return W


def unpack_weights(m: StepBcsrMatrix, blocks: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-chain weight blocks from (gradient) block data."""
    blocks = m.blocks if blocks is None else blocks
    bs = m.block_size
    out = []
    r = 0
    for dy, px in zip(m.chain_rows, m.chain_cols):
        nr, nb = dy // bs, px // bs
        start = m.row_ptr[r]
        out.append(np.ascontiguousarray(
            blocks[start:start + nr * nb].reshape(nr, nb, bs, bs).transpose(0, 2, 1, 3).reshape(dy, px)))
        r += nr
    return out


def _panel(blocks: np.ndarray, first: int, nr: int, nb: int, bs: int) -> np.ndarray:
    return blocks[first:first + nr * nb].reshape(nr, nb, bs, bs).transpose(0, 2, 1, 3).reshape(nr * bs, nb * bs)


def _cols(x: np.ndarray, cols: np.ndarray, bs: int) -> np.ndarray:
    c0 = int(cols[0])
    if cols[-1] - c0 + 1 == len(cols):
        return x[..., c0 * bs:(c0 + len(cols)) * bs]
    idx = (cols[:, None] * bs + np.arange(bs)[None, :]).reshape(-1)
    return x[..., idx]


def bcsr_forward(x: np.ndarray, m: StepBcsrMatrix, counter: FlopCounter | None = flop_counter) -> np.ndarray:
    """``y = x @ W.T`` over stored blocks only."""
    if x.shape[-1] != m.shape[1]:
        raise ValueError(f"bcsr_forward: input width {x.shape[-1]} != {m.shape[1]}")
    bs = m.block_size
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    y = np.empty((x2.shape[0], m.shape[0]), dtype=np.result_type(x.dtype, m.blocks.dtype))
    for r0, r1, cols, first in m.row_groups():
        nr = r1 - r0
        if len(cols) == 0:
            y[:, r0 * bs:r1 * bs] = 0
            continue
        W = _panel(m.blocks, first, nr, len(cols), bs)
        y[:, r0 * bs:r1 * bs] = _cols(x2, cols, bs) @ W.T
        if counter is not None:
            counter.add(2 * x2.shape[0] * nr * len(cols) * bs * bs)
    return y.reshape(*lead, m.shape[0])


def bcsr_backward_input(grad_y: np.ndarray, m: StepBcsrMatrix,
                        counter: FlopCounter | None = flop_counter) -> np.ndarray:
    """``grad_x = grad_y @ W`` walking the transposed step mask."""
    if grad_y.shape[-1] != m.shape[0]:
        raise ValueError(f"bcsr_backward_input: grad width {grad_y.shape[-1]} != {m.shape[0]}")
    bs = m.block_size
    lead = grad_y.shape[:-1]
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    gx = np.zeros((g2.shape[0], m.shape[1]), dtype=grad_y.dtype)
    for c0, c1, rows, ids in m.col_groups():
        if len(rows) == 0:
            continue
        nc = c1 - c0
        W = m.blocks[ids.reshape(-1)].reshape(len(rows), nc, bs, bs).transpose(0, 2, 1, 3).reshape(len(rows) * bs, nc * bs)
        gx[:, c0 * bs:c1 * bs] = _cols(g2, rows, bs) @ W
        if counter is not None:
            counter.add(2 * g2.shape[0] * len(rows) * nc * bs * bs)
    return gx.reshape(*lead, m.shape[1])


def bcsr_backward_weight(x: np.ndarray, grad_y: np.ndarray, m: StepBcsrMatrix,
                         counter: FlopCounter | None = flop_counter) -> np.ndarray:
    """Gradient of every stored block, ``grad_y[:, r]^T @ x[:, c]``; absent blocks get nothing."""
    if x.shape[-1] != m.shape[1] or grad_y.shape[-1] != m.shape[0]:
        raise ValueError("bcsr_backward_weight: shape mismatch")
    bs = m.block_size
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    out = np.empty_like(m.blocks, dtype=np.result_type(x.dtype, grad_y.dtype))
    for r0, r1, cols, first in m.row_groups():
        nr, nb = r1 - r0, len(cols)
        if nb == 0:
            continue
        G = g2[:, r0 * bs:r1 * bs].T @ _cols(x2, cols, bs)
        out[first:first + nr * nb] = G.reshape(nr, bs, nb, bs).transpose(0, 2, 1, 3).reshape(-1, bs, bs)
        if counter is not None:
            counter.add(2 * g2.shape[0] * nr * nb * bs * bs)
    return out


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------
BENCH_HEADER = ("path", "impl", "dy", "dx", "spec", "median_ms", "flops")


def _median_ms(fn, repeats: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_kernel(sizes, spec, repeats: int = 10, tokens: int = 1024, dtype=np.float32,
                 block_size: int | None = None, seed: int = 0, impls=("dense", "naive", "bcsr"),
                 paths=("fwd", "bwd_w", "bwd_i")) -> list[dict]:
    """Median wall-clock of fwd / bwd_w / bwd_i for the dense, naive-chain and BCSR paths."""
    if repeats < 10:
        raise ValueError("bench_kernel needs repeats >= 10")
    spec = ChainSpec.of(spec)
    rng = np.random.default_rng(seed)
    records = []
    for dy, dx in sizes:
        ddy, ddx = chain_dims(spec, dy), chain_dims(spec, dx)
        weights = [rng.standard_normal((h, p)).astype(dtype) for h, p in zip(ddy.widths, ddx.prefix)]
        m = pack_weights(weights, block_size, spec)
        W = unpack(m)
        x = rng.standard_normal((tokens, dx)).astype(dtype)
        g = rng.standard_normal((tokens, dy)).astype(dtype)
        dense_flops = 2 * tokens * dx * dy
        sparse_flops = 2 * tokens * m.nnz_blocks * m.block_size ** 2

        def naive_bwd_i():
            gx = np.zeros_like(x)
            s = 0
            for w in weights:
                gx[:, : w.shape[1]] += g[:, s:s + w.shape[0]] @ w
                s += w.shape[0]
            return gx

        def naive_bwd_w():
            s = 0
            out = []
            for w in weights:
                out.append(g[:, s:s + w.shape[0]].T @ x[:, : w.shape[1]])
                s += w.shape[0]
            return out

        table = {
            ("fwd", "dense"): (lambda: x @ W.T, dense_flops),
            ("bwd_i", "dense"): (lambda: g @ W, dense_flops),
            ("bwd_w", "dense"): (lambda: g.T @ x, dense_flops),
            ("fwd", "naive"): (lambda: chain_linear_forward(x, weights), sparse_flops),
            ("bwd_i", "naive"): (naive_bwd_i, sparse_flops),
            ("bwd_w", "naive"): (naive_bwd_w, sparse_flops),
            ("fwd", "bcsr"): (lambda: bcsr_forward(x, m, None), sparse_flops),
            ("bwd_i", "bcsr"): (lambda: bcsr_backward_input(g, m, None), sparse_flops),
            ("bwd_w", "bcsr"): (lambda: bcsr_backward_weight(x, g, m, None), sparse_flops),
        }
        for path in paths:
            for impl in impls:
                fn, flops = table[(path, impl)]
                records.append({"path": path, "impl": impl, "dy": dy, "dx": dx, "spec": str(spec),
                                "median_ms": _median_ms(fn, repeats), "flops": flops})
    return records


def records_to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_HEADER, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: (f"{r[k]:.4f}" if k == "median_ms" else r[k]) for k in BENCH_HEADER})
    return buf.getvalue()
