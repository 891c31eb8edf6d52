"""Desk-scale decoder-only transformer with factorized embeddings and
grouped cross-layer parameter sharing, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DimensionError, EfficioError, FormatError,
                     NumericalAbort, UsageError)
from .model import (ModelConfig, ModelParams, ParamReport, SharingPlan, build_sharing_plan,
                    count_enumerated, forward, init_model, param_count, plan_for)
from .data import CorpusSplit, TokenizerSpec, decode, encode, read_corpus, split_corpus
from .trainer import TrainConfig, TrainResult, TrainState, lr_at, train
from .evaluation import EvalReport, evaluate, generate, last_token_accuracy, perplexity
from .checkpoint import load_checkpoint, save_checkpoint
from .sweep import SearchSpace, SweepGrid, SweepRow, fit_config, run_sweep
from .estimator import EfficioLM

__all__ = [
    "ConfigError", "DataError", "DimensionError", "EfficioError", "FormatError",
    "NumericalAbort", "UsageError", "ModelConfig", "ModelParams", "ParamReport",
    "SharingPlan", "build_sharing_plan", "count_enumerated", "forward", "init_model",
    "param_count", "plan_for", "CorpusSplit", "TokenizerSpec", "decode", "encode",
    "read_corpus", "split_corpus", "TrainConfig", "TrainResult", "TrainState", "lr_at",
    "train", "EvalReport", "evaluate", "generate", "last_token_accuracy", "perplexity",
    "load_checkpoint", "save_checkpoint", "SearchSpace", "SweepGrid", "SweepRow",
    "fit_config", "run_sweep", "EfficioLM",
]
