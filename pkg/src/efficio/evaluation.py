"""Perplexity, last-token accuracy and sampling for trained models."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import eval_windows
from .errors import DataError, UsageError
from .model import ModelConfig, ModelParams, SharingPlan, forward
from .numerics import cross_entropy


@dataclass(frozen=True)
class EvalReport:
    nll: float
    perplexity: float
    last_token_accuracy: Optional[float]
    tokens_evaluated: int
    tokens_per_second: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_table(self) -> str:
        acc = "n/a" if self.last_token_accuracy is None else f"{self.last_token_accuracy:.4f}"
        rows = [
            ("nll (nats/token)", f"{self.nll:.6f}"),
            ("perplexity", f"{self.perplexity:.4f}"),
            ("last_token_accuracy", acc),
            ("tokens_evaluated", str(self.tokens_evaluated)),
            ("tokens_per_second", f"{self.tokens_per_second:.1f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def mean_nll(params: ModelParams, plan: SharingPlan, config: ModelConfig, tokens, T: int,
             batch_size: int = 16, max_windows: Optional[int] = None) -> Tuple[float, int]:
    """Mean next-token NLL over non-overlapping windows, inference mode."""
    if len(tokens) < T + 1:
        raise DataError(f"evaluation stream needs at least T+1={T + 1} tokens, got {len(tokens)}")
    windows = eval_windows(tokens, T, max_windows)
    total, count = 0.0, 0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        logits = forward(params, plan, config, chunk[:, :-1], training=False)
        n = chunk[:, 1:].size
        total += cross_entropy(logits, chunk[:, 1:]).item() * n
        count += n
    return total / count, count


def perplexity(params: ModelParams, plan: SharingPlan, config: ModelConfig, tokens, T: int,
               batch_size: int = 16, max_windows: Optional[int] = None) -> EvalReport:
    start = time.perf_counter()
    nll, n = mean_nll(params, plan, config, tokens, T, batch_size, max_windows)
    elapsed = max(time.perf_counter() - start, 1e-9)
    return EvalReport(nll, math.exp(nll), None, n, n / elapsed)


def last_token_accuracy(params: ModelParams, plan: SharingPlan, config: ModelConfig,
                        contexts: Sequence[Tuple[Sequence[int], int]]) -> float:
    """Fraction of (prefix, answer) pairs whose answer is the greedy next token."""
    if len(contexts) == 0:
        raise UsageError("last_token_accuracy needs at least one context")
    hits = 0
    # prefixes of equal length are scored in one batch
    by_len = {}
    for prefix, answer in contexts:
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim != 1 or len(prefix) < 1:
            raise DataError("each context prefix must be a non-empty 1-D id sequence")
        by_len.setdefault(len(prefix), []).append((prefix, int(answer)))
    for length, items in sorted(by_len.items()):
        for i in range(0, len(items), 64):
            chunk = items[i:i + 64]
            toks = np.stack([p for p, _ in chunk])
            logits = forward(params, plan, config, toks).data[:, -1, :]
            pred = logits.argmax(axis=-1)
            hits += int(sum(int(p) == a for p, (_, a) in zip(pred, chunk)))
    return hits / len(contexts)


def contexts_from_stream(tokens, prefix_len: int, count: Optional[int] = None) -> List[Tuple[np.ndarray, int]]:
    """Cut held-out text into (prefix, next token) pairs, stride prefix_len + 1."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    for s in range(0, len(tokens) - prefix_len, prefix_len + 1):
        out.append((tokens[s:s + prefix_len], int(tokens[s + prefix_len])))
        if count is not None and len(out) >= count:
            break
    return out


def evaluate(params: ModelParams, plan: SharingPlan, config: ModelConfig, tokens, T: int,
             batch_size: int = 16, max_windows: Optional[int] = None,
             accuracy_prefix: Optional[int] = None) -> EvalReport:
    """Perplexity plus last-token accuracy on the same held-out stream."""
    start = time.perf_counter()
    nll, n = mean_nll(params, plan, config, tokens, T, batch_size, max_windows)
    acc = None
    prefix = accuracy_prefix or T
    contexts = contexts_from_stream(tokens, prefix, max_windows)
    if contexts:
        acc = last_token_accuracy(params, plan, config, contexts)
    elapsed = max(time.perf_counter() - start, 1e-9)
    return EvalReport(nll, math.exp(nll), acc, n, n / elapsed)


def generate(params: ModelParams, plan: SharingPlan, config: ModelConfig, prompt: Sequence[int],
             max_new: int, temperature: float = 0.0, top_k: Optional[int] = None,
             seed: int = 0) -> np.ndarray:
    """Extend ``prompt`` by ``max_new`` tokens.

    Temperature 0 is greedy (ties go to the lowest id). Otherwise tokens are
    sampled from the renormalised top-k of ``softmax(logits / temperature)``.
    Only the most recent ``max_seq_len`` tokens are fed to the model.
    """
    if temperature < 0:
        raise UsageError(f"temperature must be >= 0, got {temperature}")
    if top_k is not None and top_k < 1:
        raise UsageError(f"top_k must be >= 1, got {top_k}")
    if max_new < 0:
        raise UsageError(f"max_new must be >= 0, got {max_new}")
    ids = [int(t) for t in prompt]
    if not ids:
        raise UsageError("prompt must not be empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    V = config.vocab_size
    for _ in range(max_new):
        window = np.array(ids[-config.max_seq_len:], dtype=np.int64)
        logits = forward(params, plan, config, window).data[0, -1]
        if temperature == 0.0 or top_k == 1:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            k = V if top_k is None else min(top_k, V)
            # stable sort keeps lower ids first among equal logits
            keep = np.argsort(-z, kind="stable")[:k]
            w = np.exp(z[keep] - z[keep].max())
            nxt = int(keep[rng.choice(k, p=w / w.sum())])
        ids.append(nxt)
    return np.array(ids, dtype=np.int64)
