"""Run configuration: strict JSON files plus named, versioned presets."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ColmConfig
from .optim import SCHEDULES


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


MLP_KEYS = {"chains", "hidden", "activation", "head", "hidden_bias"}


@dataclass
class RunConfig:
    task: str = "lm"                      # "lm" or "cifar"
    model: dict = field(default_factory=dict)
    data: str | None = None               # text file / builtin corpus, or CIFAR directory
    optimizer: str = "adamw"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    schedule: str = "constant"
    warmup: int = 0
    min_lr_ratio: float = 0.0
    grad_clip: float | None = 1.0
    batch_size: int = 16
    seq_len: int = 64
    steps: int | None = None
    epochs: int | None = None
    seed: int = 0
    dtype: str = "float32"
    loss_mode: str = "final"
    freeze_prefix: int = 0
    head_only: bool = False
    active: int | None = None
    init_from: str | None = None
    log_every: int = 10
    ckpt_every: int = 0
    eval_batches: int = 16
    holdout: float = 0.05

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.task not in ("lm", "cifar"):
            raise ConfigError(f"task must be 'lm' or 'cifar', got {self.task!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {', '.join(SCHEDULES)}")
        if self.loss_mode not in ("final", "multi"):
            raise ConfigError(f"loss_mode must be 'final' or 'multi', got {self.loss_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if (self.steps is None) == (self.epochs is None):
            raise ConfigError("exactly one of 'steps' and 'epochs' must be set")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")
        if self.task == "lm":
            if self.model or not self.init_from:
                self.colm_config()
        else:
            extra = set(self.model) - MLP_KEYS
            if extra:
                raise ConfigError(f"unknown model keys for cifar: {sorted(extra)}")

    def colm_config(self) -> ColmConfig:
        d = dict(self.model)
        d.setdefault("dtype", self.dtype)
        d["dtype"] = self.dtype
        known = {f.name for f in fields(ColmConfig)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model keys: {sorted(extra)}")
        try:
            return ColmConfig.from_dict(d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model config: {e}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return from_dict(d)


def from_dict(d: dict) -> RunConfig:
    d = copy.deepcopy(d)
    if "preset" in d:
        base = preset(d.pop("preset")).to_dict()
        model = {**base.get("model", {}), **d.pop("model", {})}
        base.update(d)
        base["model"] = model
        d = base
    known = {f.name for f in fields(RunConfig)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    return RunConfig(**d)


def loads(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(d)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return loads(p.read_text())


_TINY_LM = {"dim": 128, "hidden_dim": 512, "n_layers": 4, "n_head": 8, "n_kv_head": 4, "vocab_size": 256,
            "chains": [4, 4], "ffn_kind": "gelu", "max_seq_len": 512}

PRESETS = {
    # CIFAR-10 CoM-MLP: Adam, lr 1e-3, batch 64, 20 epochs
    "cifar-dense@1": {"task": "cifar", "model": {"chains": [1]}, "optimizer": "adam", "lr": 1e-3,
                      "betas": [0.9, 0.999], "batch_size": 64, "epochs": 20, "grad_clip": None,
                      "schedule": "constant", "log_every": 100},
    "lm-tiny@1": {"task": "lm", "model": dict(_TINY_LM), "optimizer": "adamw", "lr": 3e-3, "betas": [0.9, 0.95],
                  "weight_decay": 0.0, "schedule": "linear-warmup-cosine", "warmup": 100, "min_lr_ratio": 0.1,
                  "grad_clip": 1.0, "batch_size": 16, "seq_len": 64, "steps": 2000, "log_every": 50},
    "lm-tiny-air@1": {"task": "lm", "model": {**_TINY_LM, "kv_sharing": True}, "optimizer": "adamw", "lr": 3e-3,
                      "betas": [0.9, 0.95], "schedule": "linear-warmup-cosine", "warmup": 100,
                      "min_lr_ratio": 0.1, "grad_clip": 1.0, "batch_size": 16, "seq_len": 64, "steps": 2000,
                      "log_every": 50},
    # pretraining-table defaults (lr 2e-4, warmup 2000, max-norm 1.0) for reference, not desk runs
    "lm-pretrain@1": {"task": "lm", "model": {"dim": 2048, "hidden_dim": 8192, "n_layers": 16, "n_head": 32,
                                              "n_kv_head": 8, "vocab_size": 32000, "chains": [16, 16],
                                              "ffn_kind": "swiglu"},
                      "optimizer": "adamw", "lr": 2e-4, "schedule": "linear-warmup-cosine", "warmup": 2000,
                      "grad_clip": 1.0, "steps": 100000},
}
for _c in ((4, 12), (8, 8), (4, 4, 4, 4), (4, 4, 8)):
    PRESETS[f"cifar-com-{'-'.join(map(str, _c))}@1"] = {**PRESETS["cifar-dense@1"], "model": {"chains": list(_c)}}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return from_dict(copy.deepcopy(PRESETS[name]))
