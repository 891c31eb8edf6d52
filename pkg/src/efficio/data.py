"""Tokenization, train/validation splitting and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

UNK = "�"


@dataclass(frozen=True)
class TokenizerSpec:
    """``byte`` maps UTF-8 bytes to ids 0..255; ``char_vocab`` maps characters
    seen in a corpus to ids, with the final id reserved for unknown characters."""

    kind: str = "byte"
    vocab: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("byte", "char_vocab"):
            raise ConfigError(f"tokenizer kind must be 'byte' or 'char_vocab', got {self.kind!r}")
        if self.kind == "byte" and self.vocab:
            raise ConfigError("byte tokenizer takes no vocab list")

    @property
    def vocab_size(self) -> int:
        return 256 if self.kind == "byte" else len(self.vocab) + 1

    @classmethod
    def from_corpus(cls, text: str) -> "TokenizerSpec":
        return cls("char_vocab", tuple(sorted(set(text))))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vocab": list(self.vocab)}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerSpec":
        return cls(d.get("kind", "byte"), tuple(d.get("vocab", ())))


def encode(text: str, spec: TokenizerSpec = TokenizerSpec()) -> np.ndarray:
    if spec.kind == "byte":
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    index = {ch: i for i, ch in enumerate(spec.vocab)}
    unk = len(spec.vocab)
    return np.array([index.get(ch, unk) for ch in text], dtype=np.int64)


def decode(ids: Iterable[int], spec: TokenizerSpec = TokenizerSpec()) -> str:
    ids = [int(i) for i in ids]
    V = spec.vocab_size
    bad = [i for i in ids if not 0 <= i < V]
    if bad:
        raise DataError(f"token id {bad[0]} out of range [0, {V})")
    if spec.kind == "byte":
        return bytes(ids).decode("utf-8", errors="replace")
    table = list(spec.vocab) + [UNK]
    return "".join(table[i] for i in ids)


def read_corpus(paths: Sequence) -> str:
    """Concatenate UTF-8 text files in the given order."""
    if not paths:
        raise DataError("no corpus files given")
    parts = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise DataError(f"corpus file not found: {p}")
        try:
            parts.append(p.read_text(encoding="utf-8"))
        except UnicodeDecodeError as exc:
            raise DataError(f"{p} is not valid UTF-8: {exc}") from None
    return "".join(parts)


@dataclass(frozen=True)
class CorpusSplit:
    train: np.ndarray
    val: np.ndarray
    split_fraction: float


def split_corpus(tokens: np.ndarray, val_fraction: float = 0.1) -> CorpusSplit:
    """The validation set is the contiguous tail of the stream."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"validation fraction must be in [0, 1), got {val_fraction}")
    tokens = np.asarray(tokens, dtype=np.int64)
    n_val = int(round(len(tokens) * val_fraction))
    cut = len(tokens) - n_val
    return CorpusSplit(tokens[:cut], tokens[cut:], val_fraction)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


def num_windows(n_tokens: int, T: int) -> int:
    return (n_tokens - 1) // T


def window_starts(tokens: np.ndarray, T: int) -> np.ndarray:
    """Offsets of the non-overlapping (T+1)-token windows (stride T)."""
    n = num_windows(len(tokens), T)
    if n < 1:
        raise DataError(f"need at least T+1={T + 1} tokens, got {len(tokens)}")
    return np.arange(n) * T


def epoch_order(n_windows: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64([seed, epoch]))
    return rng.permutation(n_windows)


def batches_per_epoch(n_tokens: int, B: int, T: int) -> int:
    return -(-num_windows(n_tokens, T) // B)


def make_batch(tokens: np.ndarray, starts: np.ndarray, T: int) -> Batch:
    rows = np.stack([tokens[s:s + T + 1] for s in starts])
    return Batch(rows[:, :-1], rows[:, 1:])


def make_batches(tokens, B: int, T: int, seed: int = 0, epoch: int = 0) -> List[Batch]:
    """One epoch of shuffled batches; the last batch may hold fewer than B rows."""
    if B < 1 or T < 1:
        raise ConfigError(f"batch size and sequence length must be positive, got B={B}, T={T}")
    tokens = np.asarray(tokens, dtype=np.int64)
    starts = window_starts(tokens, T)[epoch_order(num_windows(len(tokens), T), seed, epoch)]
    return [make_batch(tokens, starts[i:i + B], T) for i in range(0, len(starts), B)]


def batch_at(tokens, B: int, T: int, seed: int, step: int) -> Batch:
    """The batch a step-indexed training loop sees at ``step``."""
    per_epoch = batches_per_epoch(len(tokens), B, T)
    epoch, index = divmod(step, per_epoch)
    starts = window_starts(tokens, T)[epoch_order(num_windows(len(tokens), T), seed, epoch)]
    return make_batch(tokens, starts[index * B:(index + 1) * B], T)


def eval_windows(tokens, T: int, limit: Optional[int] = None) -> np.ndarray:
    """Sequential non-overlapping windows [N, T+1] for evaluation."""
    tokens = np.asarray(tokens, dtype=np.int64)
    starts = window_starts(tokens, T)
    if limit is not None:
        starts = starts[:limit]
    return np.stack([tokens[s:s + T + 1] for s in starts])
