"""Adam training loop with warmup/cosine schedule and gradient clipping.

Optimizer state is keyed by stored tensor, so a parameter group shared by
several layers carries a single (m, v) pair and receives the tape's summed
gradient.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .data import CorpusSplit, batch_at, batches_per_epoch, num_windows
from .errors import ConfigError, DataError, NumericalAbort
from .evaluation import mean_nll
from .model import ModelConfig, ModelParams, SharingPlan, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 3e-4
    lr_min: float = 3e-5
    warmup_steps: int = 100
    max_steps: int = 1000
    epochs: int = 1000
    batch_size: int = 16
    seq_len: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: Optional[float] = 1.0
    seed: int = 0
    eval_interval: int = 100
    eval_windows: int = 16
    checkpoint_interval: int = 0
    early_stop_patience: Optional[int] = None
    val_fraction: float = 0.1

    def __post_init__(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name} {msg}, got {getattr(self, name)!r}")

        for name in ("warmup_steps", "max_steps", "epochs", "batch_size", "seq_len", "seed",
                     "eval_interval", "eval_windows", "checkpoint_interval"):
            v = getattr(self, name)
            need(isinstance(v, (int, np.integer)) and not isinstance(v, bool), name, "must be an integer")
        need(self.max_steps >= 1, "max_steps", "must be >= 1")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.seq_len >= 1, "seq_len", "must be >= 1")
        need(0 <= self.warmup_steps < self.max_steps, "warmup_steps", "must be in [0, max_steps)")
        need(self.lr_max > 0, "lr_max", "must be positive")
        need(0 <= self.lr_min <= self.lr_max, "lr_min", "must be in [0, lr_max]")
        need(0 <= self.beta1 < 1, "beta1", "must be in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must be in [0, 1)")
        need(self.adam_eps > 0, "adam_eps", "must be positive")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.clip_norm is None or self.clip_norm > 0, "clip_norm", "must be positive or null")
        need(self.eval_interval >= 0, "eval_interval", "must be >= 0")
        need(self.eval_windows >= 1, "eval_windows", "must be >= 1")
        need(self.checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0")
        need(self.early_stop_patience is None or self.early_stop_patience >= 1,
             "early_stop_patience", "must be >= 1 or null")
        need(0 <= self.val_fraction < 1, "val_fraction", "must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {', '.join(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then cosine decay to ``lr_min`` at ``max_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr_max * (step + 1) / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float) -> Tuple[List[np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``clip_norm``.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return list(grads), norm
    s = clip_norm / norm
    return [g * s for g in grads], norm


@dataclass
class OptimizerState:
    """Adam moments, one pair per stored tensor (aligned with ``named_tensors``)."""

    names: List[str]
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        named = params.named_tensors()
        return cls([n for n, _ in named],
                   [np.zeros_like(t.data) for _, t in named],
                   [np.zeros_like(t.data) for _, t in named])

    def __len__(self):
        return len(self.m)


def adam_step(tensors: Sequence[nx.Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
              lr: float, cfg: TrainConfig, decay_mask: Optional[Sequence[bool]] = None) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    if not len(tensors) == len(grads) == len(state.m):
        raise ValueError(f"optimizer state holds {len(state.m)} entries, got "
                         f"{len(tensors)} tensors and {len(grads)} gradients")
    if decay_mask is None:
        decay_mask = [t.ndim >= 2 for t in tensors]
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v, wd in zip(tensors, grads, state.m, state.v, decay_mask):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if wd and cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything besides the parameters needed to resume a run exactly."""

    opt: OptimizerState
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    best_val: Optional[float] = None
    stale_evals: int = 0

    @classmethod
    def fresh(cls, params: ModelParams, cfg: TrainConfig) -> "TrainState":
        rng = dropout_rng(cfg.seed)
        return cls(OptimizerState.zeros_like(params), 0, rng.bit_generator.state)


def dropout_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, 0xD0]))


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    val_loss: Optional[float] = None


@dataclass
class TrainResult:
    params: ModelParams
    state: TrainState
    trace: List[TraceRow]
    stopped_early: bool = False
    seconds: float = 0.0
    tokens_per_second: float = 0.0


def loss_and_grads(params: ModelParams, plan: SharingPlan, config: ModelConfig, inputs, targets,
                   training: bool = False, rng=None) -> Tuple[float, List[np.ndarray]]:
    """Mean cross-entropy and its gradient for every stored tensor."""
    tensors = params.tensors()
    with nx.Tape() as tape:
        logits = forward(params, plan, config, inputs, training=training, rng=rng)
        loss = nx.cross_entropy(logits, targets)
    tape.backward(loss)
    return loss.item(), [tape.grad(t) for t in tensors]


def write_trace_csv(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "val_loss"])
        for r in trace:
            w.writerow([r.step, repr(r.loss), repr(r.lr), "" if r.val_loss is None else repr(r.val_loss)])


def read_trace_csv(path) -> List[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["step"]), float(r["loss"]), float(r["lr"]),
                         float(r["val_loss"]) if r["val_loss"] else None)
                for r in csv.DictReader(fh)]


def train(params: ModelParams, plan: SharingPlan, config: ModelConfig, data: CorpusSplit,
          cfg: TrainConfig, state: Optional[TrainState] = None,
          on_step: Optional[Callable[[TraceRow], None]] = None,
          on_checkpoint: Optional[Callable[[ModelParams, TrainState], None]] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """Run (or resume) training until ``cfg.max_steps``, the epoch cap or early stop.

    ``max_steps`` optionally stops earlier without changing the schedule, which
    is how interrupted-and-resumed runs are reproduced in tests. Parameters
    are updated in place.
    """
    T, B = cfg.seq_len, cfg.batch_size
    if T > config.max_seq_len:
        raise ConfigError(f"seq_len={T} exceeds max_seq_len={config.max_seq_len}")
    if num_windows(len(data.train), T) < 1:
        raise DataError(f"training split has {len(data.train)} tokens; need at least T+1={T + 1}")
    do_eval = cfg.eval_interval > 0 and len(data.val) >= T + 1
    stop_at = min(cfg.max_steps, cfg.epochs * batches_per_epoch(len(data.train), B, T))
    if max_steps is not None:
        stop_at = min(stop_at, max_steps)

    state = state or TrainState.fresh(params, cfg)
    rng = dropout_rng(cfg.seed)
    rng.bit_generator.state = state.rng_state
    tensors = params.tensors()
    # decay matrices only, never biases or norm gains
    mask = [t.ndim >= 2 for t in tensors]
    training = config.dropout_rate > 0
    trace: List[TraceRow] = []
    stopped_early = False
    t0 = time.perf_counter()
    tokens_seen = 0

    while state.step < stop_at:
        step = state.step
        batch = batch_at(data.train, B, T, cfg.seed, step)
        try:
            loss, grads = loss_and_grads(params, plan, config, batch.inputs, batch.targets,
                                         training=training, rng=rng)
        except NumericalAbort as exc:
            raise NumericalAbort(f"step {step}: {exc}", step=step) from None
        if not math.isfinite(loss):
            raise NumericalAbort(f"step {step}: loss is {loss}", step=step)
        if cfg.clip_norm is not None:
            grads, _ = clip_gradients(grads, cfg.clip_norm)
        lr = lr_at(step, cfg)
        adam_step(tensors, grads, state.opt, lr, cfg, mask)
        tokens_seen += batch.inputs.size
        state.step += 1
        state.rng_state = rng.bit_generator.state

        row = TraceRow(step, loss, lr)
        if do_eval and state.step % cfg.eval_interval == 0:
            val, _ = mean_nll(params, plan, config, data.val, T, B, cfg.eval_windows)
            row.val_loss = val
            if state.best_val is None or val < state.best_val:
                state.best_val, state.stale_evals = val, 0
            else:
                state.stale_evals += 1
        trace.append(row)
        if on_step is not None:
            on_step(row)
        if on_checkpoint is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            on_checkpoint(params, state)
        if cfg.early_stop_patience is not None and state.stale_evals >= cfg.early_stop_patience:
            log.info("early stop at step %d: no validation improvement in %d evals",
                     state.step, state.stale_evals)
            stopped_early = True
            break

    seconds = time.perf_counter() - t0
    return TrainResult(params, state, trace, stopped_early, seconds,
                       tokens_seen / seconds if seconds > 0 else 0.0)
