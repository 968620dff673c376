"""Synthetic classification corpus and hashed-token text ingestion."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError
from .linalg import make_rng

PAD_ID = 0
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class Dataset:
    tokens: np.ndarray  # (n, seq_len) int64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    vocab_size: int

    def __post_init__(self):
        if self.tokens.ndim != 2 or len(self.tokens) != len(self.labels):
            raise DataError(f"tokens {self.tokens.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise DataError(f"token ids must lie in [0, {self.vocab_size})")

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.tokens[idx], self.labels[idx], self.num_classes, self.vocab_size)

    def class_keys(self, key_fn: Callable[[np.ndarray, int], str] | None = None) -> np.ndarray:
        """Per-sample class used for partitioning; the label unless ``key_fn`` says otherwise."""
        if key_fn is None:
            return self.labels
        keys = [key_fn(t, int(l)) for t, l in zip(self.tokens, self.labels)]
        _, inverse = np.unique(np.array(keys, dtype=object).astype(str), return_inverse=True)
        return inverse.astype(np.int64)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 20
    samples_per_class: int = 250
    vocab_size: int = 1024
    seq_len: int = 16
    signal_tokens_per_class: int = 8
    signal_rate: float = 0.5
    seed: int = 0

    def validate(self) -> "SynthConfig":
        for name in ("num_classes", "samples_per_class", "vocab_size", "seq_len", "signal_tokens_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.signal_rate <= 1.0:
            raise ConfigError(f"synth.signal_rate must be a probability, got {self.signal_rate}")
        # id 0 is padding, so only vocab_size - 1 ids can carry signal
        budget = self.signal_tokens_per_class * self.num_classes
        if budget > self.vocab_size - 1:
            raise ConfigError(
                f"signal budget {self.signal_tokens_per_class} x {self.num_classes} = {budget} "
                f"exceeds the {self.vocab_size - 1} non-pad token ids"
            )
        return self


def signal_tokens(config: SynthConfig) -> np.ndarray:
    """``(num_classes, signal_tokens_per_class)`` disjoint token-id sets, drawn from the seed."""
    rng = make_rng(config.seed, "synth-signal")
    ids = rng.permutation(np.arange(1, config.vocab_size))
    need = config.num_classes * config.signal_tokens_per_class
    return ids[:need].reshape(config.num_classes, config.signal_tokens_per_class)


def regrouped_signal(config: SynthConfig, seed: int, num_classes: int | None = None) -> np.ndarray:
    """Same signal-token pool as ``config`` dealt into ``num_classes`` groups by a fresh permutation."""
    pool = signal_tokens(config).ravel()
    k = num_classes or config.num_classes
    if pool.size % k:
        raise ConfigError(f"{pool.size} signal tokens cannot be split evenly into {k} classes")
    return make_rng(seed, "synth-regroup").permutation(pool).reshape(k, -1)


def synth_generate(config: SynthConfig, signal: np.ndarray | None = None) -> Dataset:
    """Each position is a class signal token w.p. ``signal_rate``, else uniform over non-pad ids.

    ``signal`` overrides the seed-derived ``(num_classes, tokens_per_class)``
    signal-token table.
    """
    config.validate()
    sig = signal_tokens(config) if signal is None else np.asarray(signal, dtype=np.int64)
    if sig.shape != (config.num_classes, config.signal_tokens_per_class):
        raise ConfigError(f"signal table shape {sig.shape} does not match config")
    rng = make_rng(config.seed, "synth-samples")
    n_per, L = config.samples_per_class, config.seq_len
    labels = np.repeat(np.arange(config.num_classes), n_per)
    n = len(labels)
    is_signal = rng.random((n, L)) < config.signal_rate
    pick = rng.integers(0, config.signal_tokens_per_class, size=(n, L))
    background = rng.integers(1, config.vocab_size, size=(n, L))
    tokens = np.where(is_signal, sig[labels[:, None], pick], background)
    order = rng.permutation(n)
    return Dataset(tokens[order].astype(np.int64), labels[order].astype(np.int64), config.num_classes, config.vocab_size)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def tokenize(text: str, vocab_size: int, seq_len: int) -> list[int]:
    ids = [fnv1a64(tok) % (vocab_size - 1) + 1 for tok in text.split()][:seq_len]
    return ids + [PAD_ID] * (seq_len - len(ids))


def _from_records(records, vocab_size, seq_len, num_classes, source):
    if vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2 for hashing, got {vocab_size}")
    tokens, labels = [], []
    for lineno, text, label in records:
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise DataError(f"{source}:{lineno}: label must be a non-negative integer, got {label!r}")
        if num_classes is not None and label >= num_classes:
            raise DataError(f"{source}:{lineno}: label {label} >= declared num_classes {num_classes}")
        if not isinstance(text, str):
            raise DataError(f"{source}:{lineno}: text must be a string")
        tokens.append(tokenize(text, vocab_size, seq_len))
        labels.append(label)
    if num_classes is None:
        num_classes = max(labels) + 1 if labels else 1
    return Dataset(
        np.array(tokens, dtype=np.int64).reshape(len(tokens), seq_len),
        np.array(labels, dtype=np.int64),
        num_classes,
        vocab_size,
    )


def load_jsonl(path, vocab_size: int, seq_len: int, num_classes: int | None = None) -> Dataset:
    """Read ``{"text": ..., "label": ...}`` lines and hash whitespace tokens into ids."""
    path = Path(path)

    def records():
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
                if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                    raise DataError(f"{path}:{lineno}: expected an object with 'text' and 'label'")
                yield lineno, obj["text"], obj["label"]

    return _from_records(records(), vocab_size, seq_len, num_classes, path)


def load_csv(path, vocab_size: int, seq_len: int, num_classes: int | None = None) -> Dataset:
    path = Path(path)

    def records():
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"text", "label"} <= set(reader.fieldnames):
                raise DataError(f"{path}: CSV header must contain 'text' and 'label'")
            for lineno, row in enumerate(reader, 2):
                try:
                    label = int(row["label"])
                except (TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: label {row['label']!r} is not an integer") from exc
                yield lineno, row["text"] or "", label

    return _from_records(records(), vocab_size, seq_len, num_classes, path)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    order = make_rng(seed, "train-test-split").permutation(n)
    n_test = int(round(n * test_fraction))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


# --- on-disk form used by the CLI ------------------------------------------


def save_dataset(dataset: Dataset, path, meta: dict | None = None) -> None:
    """JSONL of ``{"tokens": [...], "label": k}`` plus a sidecar ``.meta.json``."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row, label in zip(dataset.tokens.tolist(), dataset.labels.tolist()):
            fh.write(json.dumps({"tokens": row, "label": label}, separators=(",", ":")) + "\n")
    info = {
        "num_samples": len(dataset),
        "num_classes": dataset.num_classes,
        "vocab_size": dataset.vocab_size,
        "seq_len": dataset.seq_len,
        "pad_id": PAD_ID,
    }
    if meta:
        info.update(meta)
    meta_path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        info = json.loads(meta_path(path).read_text(encoding="utf-8"))
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc
    tokens = np.array([r["tokens"] for r in rows], dtype=np.int64).reshape(len(rows), info["seq_len"])
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    return Dataset(tokens, labels, info["num_classes"], info["vocab_size"])


def synth_config_dict(config: SynthConfig) -> dict:
    return asdict(config)
