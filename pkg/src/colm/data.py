"""Datasets: CIFAR-10 binary batches and byte-level text."""
from __future__ import annotations

import hashlib
import math
import os
import sysconfig
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)
CORPUS_BYTES = 1 << 20
BUILTIN_CORPUS = "builtin:stdlib"


class DataError(Exception):
    """Missing or malformed dataset."""


@dataclass
class DatasetHandle:
    kind: str
    source: str
    split: str
    records: int


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------
def cifar_dir_from_env() -> str | None:
    d = os.environ.get("COLM_CIFAR10_DIR")
    return d if d and Path(d).is_dir() else None


def decode_cifar(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode concatenated 3073-byte records into (pixels uint8 [N,3072], labels int64 [N])."""
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"byte count {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record size")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"label {labels.max()} outside [0, 9]")
    return arr[:, 1:].copy(), labels


def load_cifar(root, split: str = "train", dtype=np.float32) -> tuple[np.ndarray, np.ndarray, DatasetHandle]:
    """Images scaled to [0, 1] as flat 3072-vectors, labels, and a handle."""
    names = {"train": CIFAR_TRAIN, "test": CIFAR_TEST}.get(split)
    if names is None:
        raise ValueError(f"unknown split {split!r}")
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    xs, ys = [], []
    for n in names:
        p = root / n
        if not p.is_file():
            raise DataError(f"missing CIFAR-10 batch {p}")
        x, y = decode_cifar(p.read_bytes())
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs).astype(dtype) / dtype(255.0)
    y = np.concatenate(ys)
    return x, y, DatasetHandle("cifar10-binary", str(root), split, len(y))


def encode_cifar(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True, drop_last: bool = False):
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for s in range(0, stop, batch_size):
        yield order[s:s + batch_size]


# ---------------------------------------------------------------------------
# Byte text
# ---------------------------------------------------------------------------
def builtin_corpus(n_bytes: int = CORPUS_BYTES) -> bytes:
    """Deterministic English-heavy text: the interpreter's help topics, then stdlib sources."""
    import pydoc_data.topics as topics

    parts = [topics.topics[k].encode("utf-8") for k in sorted(topics.topics)]
    size = sum(map(len, parts))
    lib = Path(sysconfig.get_paths()["stdlib"])
    for p in sorted(lib.glob("*.py")):
        if size >= n_bytes:
            break
        b = p.read_bytes()
        parts.append(b)
        size += len(b)
    return b"".join(parts)[:n_bytes]


def load_text(source) -> bytes:
    if source in (None, BUILTIN_CORPUS):
        return builtin_corpus()
    p = Path(source)
    if not p.is_file():
        raise DataError(f"missing text file {p}")
    return p.read_bytes()


def corpus_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def unigram_entropy(data: bytes) -> float:
    """Byte unigram entropy in nats."""
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


class ByteText:
    """Byte tokens with a contiguous train / held-out split."""

    def __init__(self, data: bytes, holdout: float = 0.05, source: str = ""):
        if len(data) < 16:
            raise DataError("text corpus too small")
        self.tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        cut = int(len(self.tokens) * (1.0 - holdout))
        self.train = self.tokens[:cut]
        self.valid = self.tokens[cut:]
        self.source = source

    def handle(self, split: str = "train") -> DatasetHandle:
        arr = self.train if split == "train" else self.valid
        return DatasetHandle("byte-text", self.source, split, len(arr))

    def sample(self, rng: np.random.Generator, batch: int, seq: int, split: str = "train"):
        arr = self.train if split == "train" else self.valid
        if len(arr) <= seq + 1:
            raise DataError(f"{split} split shorter than sequence length {seq}")
        starts = rng.integers(0, len(arr) - seq - 1, size=batch)
        idx = starts[:, None] + np.arange(seq + 1)[None, :]
        win = arr[idx]
        return win[:, :-1], win[:, 1:]

    def windows(self, seq: int, split: str = "valid", limit: int | None = None):
        """Non-overlapping (inputs, targets) windows in order."""
        arr = self.train if split == "train" else self.valid
        n = (len(arr) - 1) // seq
        if limit is not None:
            n = min(n, limit)
        if n == 0:
            raise DataError(f"{split} split shorter than sequence length {seq}")
        x = arr[: n * seq].reshape(n, seq)
        y = arr[1: n * seq + 1].reshape(n, seq)
        return x, y


def perplexity(ce: float) -> float:
    return math.exp(ce)
