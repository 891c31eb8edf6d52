"""Grid sweeps over width and sharing, and inverse search on parameter count."""

from __future__ import annotations

import csv
import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .data import CorpusSplit
from .errors import ConfigError
from .evaluation import contexts_from_stream, last_token_accuracy, mean_nll
from .model import ModelConfig, init_model, param_count, plan_for
from .trainer import TrainConfig, train

CSV_COLUMNS = ("mode", "H", "G", "E", "factorized", "n_params", "train_loss",
               "val_ppl", "last_tok_acc", "tok_per_s", "seconds")
# fields that must reproduce exactly on rerun; the rest are timings
DETERMINISTIC = CSV_COLUMNS[:9]


@dataclass(frozen=True)
class SweepGrid:
    hidden_sizes: Tuple[int, ...]
    group_counts: Tuple[int, ...] = (1,)
    sharing_modes: Tuple[str, ...] = ("grouped",)
    factorize: Tuple[bool, ...] = (True,)
    base_model: ModelConfig = field(default_factory=ModelConfig)
    base_train: TrainConfig = field(default_factory=TrainConfig)
    steps_per_cell: int = 200
    eval_windows: int = 16

    def cells(self) -> List[Tuple[ModelConfig, TrainConfig]]:
        """Every cell config, validated up front. ``group_counts`` only varies
        grouped mode; other modes get one cell per (H, factorize)."""
        for name in ("hidden_sizes", "group_counts", "sharing_modes", "factorize"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"sweep axis {name} is empty")
        tc = replace(self.base_train, max_steps=self.steps_per_cell,
                     warmup_steps=min(self.base_train.warmup_steps, self.steps_per_cell - 1),
                     eval_interval=0, checkpoint_interval=0, early_stop_patience=None)
        out = []
        for mode, H, fac in itertools.product(self.sharing_modes, self.hidden_sizes, self.factorize):
            groups = self.group_counts if mode == "grouped" else (1,)
            for G in groups:
                try:
                    cfg = replace(self.base_model, sharing_mode=mode, hidden_size=H,
                                  group_count=G, factorize_embedding=fac)
                except ConfigError as exc:
                    raise ConfigError(f"sweep cell (mode={mode}, H={H}, G={G}, "
                                      f"factorized={fac}) is invalid: {exc}") from None
                out.append((cfg, tc))
        return out


@dataclass(frozen=True)
class SweepRow:
    mode: str
    H: int
    G: int
    E: int
    factorized: bool
    n_params: int
    train_loss: float
    val_ppl: float
    last_tok_acc: float
    tok_per_s: float
    seconds: float

    def deterministic_part(self) -> tuple:
        return tuple(getattr(self, k) for k in DETERMINISTIC)


def run_cell(model_cfg: ModelConfig, train_cfg: TrainConfig, data: CorpusSplit,
             eval_windows: int = 16) -> SweepRow:
    start = time.perf_counter()
    params = init_model(model_cfg, train_cfg.seed)
    plan = plan_for(model_cfg)
    result = train(params, plan, model_cfg, data, train_cfg)
    T = train_cfg.seq_len
    val_tokens = data.val if len(data.val) >= T + 1 else data.train
    nll, _ = mean_nll(params, plan, model_cfg, val_tokens, T, train_cfg.batch_size, eval_windows)
    contexts = contexts_from_stream(val_tokens, T, eval_windows * 4)
    acc = last_token_accuracy(params, plan, model_cfg, contexts)
    return SweepRow(
        mode=model_cfg.sharing_mode,
        H=model_cfg.hidden_size,
        G=model_cfg.group_count,
        E=model_cfg.embedding_size if model_cfg.factorize_embedding else model_cfg.hidden_size,
        factorized=model_cfg.factorize_embedding,
        n_params=param_count(model_cfg).total_unique,
        train_loss=result.trace[-1].loss,
        val_ppl=float(np.exp(nll)),
        last_tok_acc=acc,
        tok_per_s=result.tokens_per_second,
        seconds=time.perf_counter() - start,
    )


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(grid: SweepGrid, data: CorpusSplit, out_dir=None, workers: int = 1) -> List[SweepRow]:
    """Train every cell from the same seed for the same step budget.

    Rows come back in grid order whatever ``workers`` is. With ``out_dir`` set,
    ``sweep.csv`` and ``sweep.md`` are written there.
    """
    cells = grid.cells()
    jobs = [(m, t, data, grid.eval_windows) for m, t in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_args, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "sweep.csv", rows)
        (out / "sweep.md").write_text(to_markdown(rows))
    return rows


def write_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in CSV_COLUMNS])


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def human_count(n: int) -> str:
    for div, suffix in ((1e12, "T"), (1e9, "B"), (1e6, "M"), (1e3, "K")):
        if n >= div:
            return f"{n / div:.3g}{suffix}"
    return str(n)


def to_markdown(rows: Sequence[SweepRow]) -> str:
    header = ("| Model | $d_{model}$ | $n_{params}$ | E | train loss | val ppl | "
              "last-token acc | tok/s |")
    lines = [header, "|" + "---|" * 8]
    for r in rows:
        name = f"{r.mode} G={r.G}" if r.mode == "grouped" else r.mode
        if not r.factorized:
            name += " (full emb)"
        lines.append(f"| {name} | {r.H} | {human_count(r.n_params)} ({r.n_params}) | {r.E} | "
                     f"{r.train_loss:.4f} | {r.val_ppl:.3f} | {r.last_tok_acc:.4f} | {r.tok_per_s:.0f} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Inverse search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Candidate values per knob; hidden size and heads come from ``base``."""

    base: ModelConfig
    num_layers: Tuple[int, ...]
    embedding_sizes: Tuple[int, ...]
    group_counts: Tuple[int, ...]
    vocab_sizes: Tuple[int, ...]
    d_ff_multipliers: Tuple[float, ...] = (4,)

    def __iter__(self):
        H = self.base.hidden_size
        for L, E, G, V, mult in itertools.product(self.num_layers, self.embedding_sizes,
                                                  self.group_counts, self.vocab_sizes,
                                                  self.d_ff_multipliers):
            if G > L or (self.base.factorize_embedding and E > H):
                continue
            yield replace(self.base, num_layers=L, embedding_size=E, group_count=G,
                          vocab_size=V, d_ff=int(round(mult * H)))


def fit_config(target: int, space: SearchSpace, tolerance: float) -> List[ModelConfig]:
    """All configs in ``space`` whose unique parameter count is within
    ``tolerance`` (relative) of ``target``, closest first. Ties keep
    enumeration order."""
    if target <= 0:
        raise ConfigError(f"target parameter count must be positive, got {target}")
    if tolerance < 0:
        raise ConfigError(f"tolerance must be >= 0, got {tolerance}")
    hits = []
    seen = set()
    for i, cfg in enumerate(space):
        if cfg in seen:
            continue
        seen.add(cfg)
        n = param_count(cfg).total_unique
        err = abs(n - target) / target
        if err <= tolerance:
            hits.append((abs(n - target), i, cfg))
    hits.sort(key=lambda h: (h[0], h[1]))
    return [cfg for _, _, cfg in hits]
