"""scikit-learn style wrapper: ``EfficioLM().fit(text).score(held_out)``."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import TokenizerSpec, decode, encode, split_corpus
from .errors import UsageError
from .evaluation import generate, last_token_accuracy, mean_nll
from .model import ModelConfig, forward, init_model, param_count, plan_for
from .trainer import TrainConfig, train


class EfficioLM(BaseEstimator):
    """Language model estimator.

    Constructor arguments are the model and training hyperparameters.
    ``vocab_size`` is taken from the tokenizer at fit time. ``fit`` accepts a
    string, a list of strings (joined) or a 1-D array of token ids.
    """

    def __init__(self, embedding_size=64, hidden_size=128, num_layers=4, num_heads=4, d_ff=512,
                 max_seq_len=128, sharing_mode="grouped", group_count=2, factorize_embedding=True,
                 tie_output_head=True, activation="gelu", dropout_rate=0.0, tokenizer="byte",
                 lr_max=3e-4, lr_min=3e-5, warmup_steps=100, max_steps=1000, batch_size=16,
                 seq_len=128, weight_decay=0.0, clip_norm=1.0, eval_interval=0, val_fraction=0.0,
                 seed=0):
        self.embedding_size = embedding_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.sharing_mode = sharing_mode
        self.group_count = group_count
        self.factorize_embedding = factorize_embedding
        self.tie_output_head = tie_output_head
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.tokenizer = tokenizer
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.eval_interval = eval_interval
        self.val_fraction = val_fraction
        self.seed = seed

    _MODEL_KEYS = ("embedding_size", "hidden_size", "num_layers", "num_heads", "d_ff", "max_seq_len",
                   "sharing_mode", "group_count", "factorize_embedding", "tie_output_head",
                   "activation", "dropout_rate")
    _TRAIN_KEYS = ("lr_max", "lr_min", "warmup_steps", "max_steps", "batch_size", "seq_len",
                   "weight_decay", "clip_norm", "eval_interval", "val_fraction", "seed")

    def _configs(self, vocab_size: int):
        model = ModelConfig(vocab_size=vocab_size, **{k: getattr(self, k) for k in self._MODEL_KEYS})
        tc = TrainConfig(**{k: getattr(self, k) for k in self._TRAIN_KEYS})
        return model, tc

    def _tokens(self, X) -> np.ndarray:
        if isinstance(X, str):
            return encode(X, self.tokenizer_)
        if isinstance(X, (list, tuple)) and X and all(isinstance(s, str) for s in X):
            return encode("".join(X), self.tokenizer_)
        return np.asarray(X, dtype=np.int64).ravel()

    def fit(self, X, y=None):
        if self.tokenizer == "byte":
            self.tokenizer_ = TokenizerSpec()
        elif self.tokenizer == "char":
            text = X if isinstance(X, str) else "".join(X)
            self.tokenizer_ = TokenizerSpec.from_corpus(text)
        else:
            raise UsageError(f"tokenizer must be 'byte' or 'char', got {self.tokenizer!r}")
        self.config_, self.train_config_ = self._configs(self.tokenizer_.vocab_size)
        tokens = self._tokens(X)
        self.plan_ = plan_for(self.config_)
        self.params_ = init_model(self.config_, self.seed)
        result = train(self.params_, self.plan_, self.config_,
                       split_corpus(tokens, self.val_fraction), self.train_config_)
        self.trace_ = result.trace
        self.n_params_ = param_count(self.config_).total_unique
        return self

    def _nll(self, X) -> float:
        check_is_fitted(self, "params_")
        tokens = self._tokens(X)
        T = min(self.seq_len, len(tokens) - 1)
        nll, _ = mean_nll(self.params_, self.plan_, self.config_, tokens, max(T, 1), self.batch_size)
        return nll

    def score(self, X, y=None) -> float:
        """Negative mean NLL per token (higher is better)."""
        return -self._nll(X)

    def perplexity(self, X) -> float:
        return float(np.exp(self._nll(X)))

    def predict(self, X) -> np.ndarray:
        """Greedy next-token id for each prefix (string or id sequence)."""
        check_is_fitted(self, "params_")
        if isinstance(X, str):
            X = [X]
        prefixes = [self._tokens(x) for x in X]
        out = []
        for p in prefixes:
            window = p[-self.config_.max_seq_len:]
            out.append(int(forward(self.params_, self.plan_, self.config_, window).data[0, -1].argmax()))
        return np.array(out, dtype=np.int64)

    def _answer_id(self, a) -> int:
        if isinstance(a, str):
            ids = self._tokens(a)
            if len(ids) != 1:
                raise UsageError(f"answer {a!r} is {len(ids)} tokens, expected exactly one")
            return int(ids[0])
        return int(a)

    def accuracy(self, contexts) -> float:
        """Last-token accuracy over ``(prefix, answer)`` pairs; answers may be
        single-token strings or ids."""
        check_is_fitted(self, "params_")
        return last_token_accuracy(self.params_, self.plan_, self.config_,
                                   [(self._tokens(p), self._answer_id(a)) for p, a in contexts])

    def generate(self, prompt, max_new: int = 64, temperature: float = 0.0,
                 top_k: Optional[int] = None, seed: int = 0):
        """Continue ``prompt``; returns text for a string prompt, else ids."""
        check_is_fitted(self, "params_")
        ids = generate(self.params_, self.plan_, self.config_, self._tokens(prompt), max_new,
                       temperature, top_k, seed)
        return decode(ids, self.tokenizer_) if isinstance(prompt, str) else ids
