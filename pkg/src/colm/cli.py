"""Command line: ``python -m colm <verb> ...``.

Errors are printed as one line ``error:<CODE>: <message>`` on stderr and the
process exits with the code's status.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import lifecycle as L
from . import sparse
from . import tensor as T
from .chain import ChainConfigError, ChainSpec, check_active
from .data import ByteText, DataError, load_cifar, load_text
from .model import Colm, ColmConfig
from .selftest import format_results, run_selftest
from .train import TrainingError, eval_cifar, eval_lm, train

EXIT = {"USAGE": 2, "CONFIG": 3, "DATA": 4, "CHECKPOINT": 5, "RANGE": 6, "CHAIN": 7, "NAN": 8, "SELFTEST": 9,
        "VERIFY": 10, "INTERNAL": 1}


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("USAGE", message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config (JSON) or preset name")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path or directory")
    p.add_argument("--active-chains", type=int, dest="active")
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="colm", description="Chain-of-Model training, evaluation and lifecycle tools")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a run config")
    _common(p)
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--data", help="override the configured dataset path")

    p = sub.add_parser("eval", help="evaluate a checkpoint at a chain count")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="text file / builtin:stdlib, or CIFAR-10 directory")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--limit", type=int, default=64, help="max held-out windows (LM)")

    p = sub.add_parser("bench-prefill", help="time full vs first-chain prefill")
    _common(p)
    p.add_argument("--checkpoint", help="KV-sharing checkpoint (default: fresh desk model)")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("bench-kernel", help="time dense / naive / BCSR chain-linear kernels")
    _common(p)
    p.add_argument("--sizes", default="4096x4096", help="comma list of DYxDX")
    p.add_argument("--chains", default="8,8,8,8")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--tokens", type=int, default=1024)
    p.add_argument("--block-size", type=int)

    p = sub.add_parser("expand", help="append chains to a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chains", required=True, help="bases of the new chains, e.g. 8 or 4,4")

    p = sub.add_parser("extract", help="slice a chain-prefix sub-model")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, help="chain prefix to keep (defaults to --active-chains)")

    p = sub.add_parser("selftest", help="run the invariant suite")
    _common(p)
    p.add_argument("--scale", type=int, default=1)
    return ap


def _parse_ints(s: str, what: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise CliError("USAGE", f"{what} must be comma-separated integers, got {s!r}") from None


def _load_ckpt(path) -> L.Checkpoint:
    try:
        return L.load(path)
    except FileNotFoundError:
        raise CliError("CHECKPOINT", f"checkpoint {path} not found") from None


def _model(path, dtype=None):
    m = _load_ckpt(path).to_model()
    return L.cast_model(m, dtype) if dtype else m


def _run_config(args) -> C.RunConfig:
    if not args.config:
        raise CliError("USAGE", "train needs --config (file path or preset name)")
    cfg = C.preset(args.config) if args.config in C.PRESETS else C.load(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.dtype:
        kw["dtype"] = args.dtype
    if args.active is not None:
        kw["active"] = args.active
    if getattr(args, "steps", None) is not None:
        kw.update(steps=args.steps, epochs=None)
    if getattr(args, "data", None):
        kw["data"] = args.data
    return cfg.replace(**kw) if kw else cfg


def cmd_train(args, out) -> int:
    cfg = _run_config(args)
    if cfg.task == "cifar" and not cfg.data:
        raise CliError("DATA", "cifar training needs a dataset directory (config 'data' or --data)")
    out_dir = Path(args.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.dumps())
    res = train(cfg, out_dir=out_dir, echo=lambda line: print(line, file=out, flush=True))
    print(f"checkpoint={out_dir / 'final.colm'} params={res.model.num_params()} final_loss={res.final_loss:.6f}",
          file=out)
    return 0


def cmd_eval(args, out) -> int:
    model = _model(args.checkpoint, args.dtype)
    active = check_active(args.active, model.spec.n)
    if isinstance(model, Colm):
        text = ByteText(load_text(args.data), source=str(args.data or "builtin:stdlib"))
        r = eval_lm(model, text, args.seq_len, active, args.limit)
        print(f"active={r['active']} ce={r['ce']:.6f} ppl={r['ppl']:.4f} tokens={r['tokens']}", file=out)
    else:
        if not args.data:
            raise CliError("DATA", "CIFAR evaluation needs --data pointing at the binary batches")
        x, y, _ = load_cifar(args.data, "test", model.dtype)
        r = eval_cifar(model, x, y, active)
        print(f"active={r['active']} accuracy={r['accuracy']:.2f} ce={r['ce']:.6f} n={r['n']}", file=out)
    return 0


DESK_PREFILL = dict(dim=512, hidden_dim=2048, n_layers=2, n_head=32, n_kv_head=8, vocab_size=256,
                    chains=(8, 8, 8, 8), kv_sharing=True, max_seq_len=16384)


def cmd_bench_prefill(args, out) -> int:
    if args.checkpoint:
        model = _model(args.checkpoint, args.dtype)
    else:
        model = Colm(ColmConfig(**DESK_PREFILL, dtype=args.dtype or "float32"), seed=args.seed or 0)
    if not isinstance(model, Colm) or not model.cfg.kv_sharing:
        raise CliError("CHAIN", "bench-prefill needs a KV-sharing CoLM checkpoint")
    lengths = _parse_ints(args.lengths, "--lengths")
    try:
        rows = L.bench_prefill(model, lengths, args.repeats, args.seed or 0)
    except ValueError as e:
        raise CliError("RANGE", str(e)) from None
    print("length,full_ms,first_ms,speedup,cache_equal", file=out)
    for r in rows:
        print(f"{r['length']},{r['full_ms']:.3f},{r['first_ms']:.3f},{r['speedup']:.3f},{r['cache_equal']}",
              file=out)
    return 0


def cmd_bench_kernel(args, out) -> int:
    sizes = []
    for s in args.sizes.split(","):
        try:
            dy, dx = (int(v) for v in s.lower().split("x"))
        except ValueError:
            raise CliError("USAGE", f"size {s!r} must look like 4096x4096") from None
        sizes.append((dy, dx))
    if args.repeats < 10:
        raise CliError("USAGE", "bench-kernel needs --repeats >= 10 for a stable median")
    spec = ChainSpec(tuple(_parse_ints(args.chains, "--chains")))
    dtype = np.float64 if args.dtype == "float64" else np.float32
    recs = sparse.bench_kernel(sizes, spec, args.repeats, args.tokens, dtype, args.block_size, args.seed or 0)
    text = sparse.records_to_csv(recs)
    out.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_expand(args, out) -> int:
    if not args.out:
        raise CliError("USAGE", "expand needs --out")
    model = _model(args.checkpoint, args.dtype)
    if not isinstance(model, Colm):
        raise CliError("CHAIN", "chain expansion is implemented for CoLM checkpoints")
    new = _parse_ints(args.chains, "--chains")
    big = L.expand_chains(model, new, seed=args.seed or 0)
    probe = np.random.default_rng(args.seed or 0).integers(0, model.cfg.vocab_size, (2, 16))
    with T.no_grad():
        same = np.array_equal(big(probe).data, model(probe).data)
    if not same:
        raise CliError("VERIFY", "expanded model does not reproduce the original logits")
    L.save(big, args.out)
    delta = big.num_params() - model.num_params()
    print(f"spec={model.spec}->{big.spec} params={model.num_params()}->{big.num_params()} delta={delta} "
          f"analytic_delta={L.expansion_param_delta(model.cfg, new)} logits_preserved=True out={args.out}",
          file=out)
    return 0


def cmd_extract(args, out) -> int:
    if not args.out:
        raise CliError("USAGE", "extract needs --out")
    model = _model(args.checkpoint, args.dtype)
    i = args.index if args.index is not None else args.active
    if i is None:
        raise CliError("USAGE", "extract needs --index (or --active-chains)")
    i = check_active(i, model.spec.n)
    sub = L.extract_submodel(model, i)
    rng = np.random.default_rng(args.seed or 0)
    with T.no_grad():
        if isinstance(model, Colm):
            probe = rng.integers(0, model.cfg.vocab_size, (2, 16))
        else:
            probe = rng.uniform(0, 1, (4, model.n_in)).astype(model.dtype)
        ok = np.array_equal(sub(probe).data, model(probe, active=i).data)
    if not ok:
        raise CliError("VERIFY", f"sub-model {i} does not reproduce the prefix logits")
    L.save(sub, args.out)
    print(f"index={i} spec={sub.spec} params={sub.num_params()} of {model.num_params()} commutes=True "
          f"out={args.out}", file=out)
    return 0


def cmd_selftest(args, out) -> int:
    res = run_selftest(args.seed or 0, args.scale)
    print(format_results(res), file=out)
    if not all(r.ok for r in res):
        raise CliError("SELFTEST", "; ".join(f"{r.name}: {r.detail}" for r in res if not r.ok))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench-prefill": cmd_bench_prefill,
            "bench-kernel": cmd_bench_kernel, "expand": cmd_expand, "extract": cmd_extract,
            "selftest": cmd_selftest}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.verb](args, out)
    except CliError as e:
        code, msg = e.code, str(e)
    except C.ConfigError as e:
        code, msg = "CONFIG", str(e)
    except DataError as e:
        code, msg = "DATA", str(e)
    except L.CheckpointError as e:
        code, msg = "CHECKPOINT", str(e)
    except TrainingError as e:
        code, msg = "NAN", str(e)
    except ChainConfigError as e:
        code, msg = "CHAIN", str(e)
    except ValueError as e:
        code, msg = ("RANGE" if "active" in str(e) or "outside" in str(e) else "CHAIN"), str(e)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    print(f"error:{code}: {' '.join(msg.split())}", file=err)
    return EXIT[code]


if __name__ == "__main__":
    sys.exit(main())
