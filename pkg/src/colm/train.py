"""Training and evaluation loops for the byte LM and the CIFAR CoM-MLP."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lifecycle as L
from . import tensor as T
from .chain import Module, check_active
from .config import RunConfig
from .data import ByteText, batches, load_cifar, load_text
from .model import Colm, ComMlp
from .optim import clip_grad_norm, lr_at, make_optimizer


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


def format_record(step: int, loss: float, chain_losses, lr: float, gnorm: float) -> str:
    parts = [f"step={step}", f"loss={loss:.6f}"]
    parts += [f"loss_chain_{i}={l:.6f}" for i, l in enumerate(chain_losses, 1)]
    parts += [f"lr={lr:.6g}", f"gnorm={gnorm:.6f}"]
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = int(v) if k == "step" else float(v)
    return out


@dataclass
class TrainResult:
    model: Module
    records: list = field(default_factory=list)
    log: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1]["loss"] if self.records else float("nan")

    def tail_loss(self, n: int = 50) -> float:
        vals = [r["loss"] for r in self.records[-n:]]
        return float(np.mean(vals)) if vals else float("nan")


def build_from_config(cfg: RunConfig) -> Module:
    if cfg.init_from:
        return L.load_model(cfg.init_from)
    if cfg.task == "lm":
        return Colm(cfg.colm_config(), seed=cfg.seed)
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    return ComMlp(seed=cfg.seed, dtype=dtype, **cfg.model)


def trainable_names(model: Module, cfg: RunConfig) -> dict[str, bool]:
    mask = L.freeze_prefix(model, cfg.freeze_prefix).trainable
    if cfg.head_only:
        head = ("head.",) if isinstance(model, Colm) else ("out.",)
        mask = {n: ok and n.startswith(head) for n, ok in mask.items()}
    return mask


@contextlib.contextmanager
def frozen(model: Module, trainable: dict[str, bool]):
    """Detach non-trainable parameters from the tape for the duration."""
    saved = {}
    for name, t, _ in model.named_parameters():
        saved[name] = t.requires_grad
        t.requires_grad = trainable[name]
    try:
        yield
    finally:
        for name, t, _ in model.named_parameters():
            t.requires_grad = saved[name]


class Trainer:
    def __init__(self, cfg: RunConfig, model: Module | None = None, out_dir=None, echo=None):
        self.cfg = cfg
        self.model = model if model is not None else build_from_config(cfg)
        self.trainable = trainable_names(self.model, cfg)
        self.params = [t for n, t, _ in self.model.named_parameters() if self.trainable[n]]
        self.opt = make_optimizer(cfg.optimizer, self.params, cfg.lr, cfg.betas, cfg.weight_decay)
        self.out_dir = Path(out_dir) if out_dir else None
        self.echo = echo
        self.result = TrainResult(self.model)
        self._log_fh = None

    # -- bookkeeping ---------------------------------------------------------
    def _emit(self, step, loss, chain_losses, lr, gnorm):
        line = format_record(step, loss, chain_losses, lr, gnorm)
        self.result.log.append(line)
        self.result.records.append(parse_record(line))
        if self._log_fh:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()
        if self.echo:
            self.echo(line)

    def save(self, name: str) -> Path | None:
        if not self.out_dir:
            return None
        frozen_map = {n: not ok for n, ok in self.trainable.items()}
        return_path = self.out_dir / name
        L.save(self.model, return_path, frozen=frozen_map, extra={"run": self.cfg.to_dict()})
        return return_path

    # -- core step -----------------------------------------------------------
    def step(self, step: int, total: int, loss_fn) -> tuple[float, list, float, float]:
        cfg = self.cfg
        lr = lr_at(step, cfg.lr, cfg.schedule, cfg.warmup, total, cfg.min_lr_ratio)
        self.opt.zero_grad()
        try:
            losses, combined = loss_fn()
        except FloatingPointError as e:
            raise TrainingError(step, f"non-finite forward value ({e})") from None
        lv = float(combined.data)
        if not math.isfinite(lv):
            raise TrainingError(step, f"loss is {lv}")
        T.backward(combined, wrt=self.params)
        gnorm = clip_grad_norm(self.params, cfg.grad_clip)
        if not math.isfinite(gnorm):
            raise TrainingError(step, f"gradient norm is {gnorm}")
        self.opt.step(lr)
        chain = [float(l.data) for l in losses] if len(losses) > 1 else []
        return lv, chain, lr, gnorm

    def run(self, loss_batches, total: int) -> TrainResult:
        cfg = self.cfg
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "metrics.log", "w")
        try:
            with frozen(self.model, self.trainable):
                for step, loss_fn in enumerate(loss_batches):
                    lv, chain, lr, gnorm = self.step(step, total, loss_fn)
                    if step % cfg.log_every == 0 or step == total - 1:
                        self._emit(step, lv, chain, lr, gnorm)
                    if cfg.ckpt_every and step and step % cfg.ckpt_every == 0:
                        self.save(f"step{step:06d}.colm")
        finally:
            if self._log_fh:
                self._log_fh.close()
                self._log_fh = None
        self.save("final.colm")
        return self.result


# ---------------------------------------------------------------------------
# Language model
# ---------------------------------------------------------------------------
def lm_dataset(cfg: RunConfig) -> ByteText:
    return ByteText(load_text(cfg.data), cfg.holdout, str(cfg.data or "builtin:stdlib"))


def train_lm(cfg: RunConfig, text: ByteText | None = None, model: Colm | None = None, out_dir=None,
             echo=None) -> TrainResult:
    text = text or lm_dataset(cfg)
    tr = Trainer(cfg, model, out_dir, echo)
    rng = np.random.default_rng(cfg.seed + 1)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * max(1, len(text.train) // (cfg.batch_size * cfg.seq_len))
    active = check_active(cfg.active, tr.model.spec.n)

    def stream():
        for _ in range(total):
            x, y = text.sample(rng, cfg.batch_size, cfg.seq_len)
            yield lambda x=x, y=y: tr.model.loss(x, y, active, cfg.loss_mode)

    return tr.run(stream(), total)


def eval_lm(model: Colm, text: ByteText, seq_len: int = 64, active: int | None = None, limit: int | None = 64,
            batch: int = 16, split: str = "valid") -> dict:
    """Per-token cross entropy (nats) and perplexity at ``active`` chains."""
    active = check_active(active, model.spec.n)
    x, y = text.windows(seq_len, split, limit)
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(x), batch):
            _, ce = model.loss(x[s:s + batch], y[s:s + batch], active, "final")
            n = y[s:s + batch].size
            total += float(ce.data) * n
            count += n
    ce = total / count
    return {"active": active, "ce": ce, "ppl": math.exp(ce), "tokens": count}


# ---------------------------------------------------------------------------
# CIFAR
# ---------------------------------------------------------------------------
def train_cifar(cfg: RunConfig, train_xy=None, model: ComMlp | None = None, out_dir=None, echo=None) -> TrainResult:
    if train_xy is None:
        x, y, _ = load_cifar(cfg.data, "train", np.float64 if cfg.dtype == "float64" else np.float32)
    else:
        x, y = train_xy
    tr = Trainer(cfg, model, out_dir, echo)
    rng = np.random.default_rng(cfg.seed + 1)
    per_epoch = math.ceil(len(y) / cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    active = check_active(cfg.active, tr.model.spec.n)

    def stream():
        done = 0
        while done < total:
            for idx in batches(len(y), cfg.batch_size, rng):
                if done >= total:
                    return
                done += 1
                xb, yb = x[idx], y[idx]
                yield lambda xb=xb, yb=yb: _mlp_loss(tr.model, xb, yb, active, cfg.loss_mode)

    return tr.run(stream(), total)


def _mlp_loss(model: ComMlp, x, y, active, mode):
    if mode == "multi" and model.head_kind == "prefix":
        logits = model.forward(x, active, all_chains=True)
        losses = [T.cross_entropy(l, y) for l in logits]
        total = losses[0]
        for l in losses[1:]:
            total = T.add(total, l)
        return losses, T.scale(total, 1.0 / len(losses))
    l = T.cross_entropy(model.forward(x, active), y)
    return [l], l


def eval_cifar(model: ComMlp, x, y, active: int | None = None, batch: int = 1000) -> dict:
    active = check_active(active, model.spec.n)
    correct, ce = 0, 0.0
    with T.no_grad():
        for s in range(0, len(y), batch):
            logits = model.forward(x[s:s + batch], active)
            correct += int((logits.data.argmax(-1) == y[s:s + batch]).sum())
            ce += float(T.cross_entropy(logits, y[s:s + batch]).data) * len(y[s:s + batch])
    return {"active": active, "accuracy": 100.0 * correct / len(y), "ce": ce / len(y), "n": len(y)}


def train(cfg: RunConfig, out_dir=None, echo=None) -> TrainResult:
    if cfg.task == "lm":
        return train_lm(cfg, out_dir=out_dir, echo=echo)
    return train_cifar(cfg, out_dir=out_dir, echo=echo)
