"""``efficio`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numerical abort (NaN/Inf during training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple


from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import TokenizerSpec, decode, encode, read_corpus, split_corpus
from .errors import ConfigError, EfficioError, NumericalAbort, UsageError
from .evaluation import evaluate, generate
from .gradcheck import TOLERANCE, model_grad_check, run_suite
from .model import ModelConfig, init_model, param_count, plan_for
from .sweep import SearchSpace, SweepGrid, fit_config, run_sweep
from .trainer import TrainConfig, read_trace_csv, train, write_trace_csv

log = logging.getLogger("efficio")

MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
MANIFEST_KEYS = {"model", "train", "data", "tokenizer", "out", "seed", "version"}


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def split_config(raw: dict) -> Tuple[dict, dict, dict]:
    """Split a flat or ``{"model": .., "train": ..}`` config into its parts.

    Unknown keys are errors so a misspelt hyperparameter never silently falls
    back to its default.
    """
    if "model" in raw or "train" in raw:
        unknown = sorted(set(raw) - MANIFEST_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        model, train_ = dict(raw.get("model") or {}), dict(raw.get("train") or {})
        for name, section, known in (("model", model, MODEL_FIELDS), ("train", train_, TRAIN_FIELDS)):
            bad = sorted(set(section) - known)
            if bad:
                raise ConfigError(f"unknown {name} field(s): {', '.join(bad)}")
        extra = {k: raw[k] for k in ("data", "tokenizer") if k in raw}
        return model, train_, extra
    model, train_, extra = {}, {}, {}
    for k, v in raw.items():
        if k in MODEL_FIELDS:
            model[k] = v
        elif k in TRAIN_FIELDS:
            train_[k] = v
        elif k in ("data", "tokenizer"):
            extra[k] = v
        else:
            raise ConfigError(f"unknown config field: {k}")
    return model, train_, extra


def parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects field=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def resolve(args) -> Tuple[ModelConfig, TrainConfig, dict]:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    model, train_, extra = split_config(raw)
    over_model, over_train, _ = split_config(parse_overrides(getattr(args, "set", None)))
    model.update(over_model)
    train_.update(over_train)
    if getattr(args, "seed", None) is not None:
        train_["seed"] = args.seed
    for key in ("max_steps", "batch_size", "seq_len"):
        value = getattr(args, key, None)
        if value is not None:
            train_[key] = value
    mcfg = ModelConfig.from_dict(model)
    tcfg = TrainConfig.from_dict(train_)
    return mcfg, tcfg, extra


def emit(obj, as_json: bool, table: Optional[str] = None) -> None:
    if as_json:
        print(json.dumps(obj, sort_keys=False))
    else:
        print(table if table is not None else json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_count_params(args) -> int:
    mcfg, _, _ = resolve(args)
    report = param_count(mcfg)
    d = report.to_dict()
    width = max(map(len, d))
    table = "\n".join(f"{k.ljust(width)}  {v:,}" if isinstance(v, int) else f"{k.ljust(width)}  {v:.4f}"
                      for k, v in d.items())
    emit(d, args.json, table)
    return 0


def _tokenizer_for(kind: str, text: str, extra: dict) -> TokenizerSpec:
    if "tokenizer" in extra:
        return TokenizerSpec.from_dict(extra["tokenizer"])
    if kind == "char":
        return TokenizerSpec.from_corpus(text)
    return TokenizerSpec()


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    mcfg, tcfg, extra = resolve(args)
    data_paths = args.data or extra.get("data")
    if not data_paths:
        raise UsageError("train needs --data FILE [FILE ...]")
    out = _require_out(args)
    text = read_corpus(data_paths)
    tok = _tokenizer_for(args.tokenizer, text, extra)
    if mcfg.vocab_size != tok.vocab_size:
        mcfg = replace(mcfg, vocab_size=tok.vocab_size)
    manifest = {
        "version": __version__,
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "data": [str(p) for p in data_paths],
        "tokenizer": tok.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    split = split_corpus(encode(text, tok), tcfg.val_fraction)
    plan = plan_for(mcfg)
    state, previous = None, []
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.model_config != mcfg:
            raise ConfigError("resume checkpoint was written for a different model config")
        if ck.state is None:
            raise ConfigError("resume checkpoint carries no optimizer state")
        params, state = ck.params, ck.state
        if (out / "loss.csv").exists():
            previous = [r for r in read_trace_csv(out / "loss.csv") if r.step < state.step]
    else:
        params = init_model(mcfg, tcfg.seed)

    def on_checkpoint(p, s):
        save_checkpoint(out / f"step{s.step:07d}.gpte", p, mcfg, tcfg, s, tok)

    def on_step(row):
        if not args.quiet and (row.step % 50 == 0 or row.val_loss is not None):
            val = "" if row.val_loss is None else f" val {row.val_loss:.4f}"
            print(f"step {row.step:6d} loss {row.loss:.4f} lr {row.lr:.3e}{val}", file=sys.stderr)

    result = train(params, plan, mcfg, split, tcfg, state=state,
                   on_step=on_step, on_checkpoint=on_checkpoint)
    write_trace_csv(out / "loss.csv", previous + result.trace)
    save_checkpoint(out / "model.gpte", result.params, mcfg, tcfg, result.state, tok)
    summary = {"steps": result.state.step, "final_loss": result.trace[-1].loss if result.trace else None,
               "stopped_early": result.stopped_early, "seconds": result.seconds,
               "tokens_per_second": result.tokens_per_second}
    emit(summary, args.json)
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    data_paths = args.data
    if not data_paths:
        raise UsageError("eval needs --data FILE [FILE ...]")
    tokens = encode(read_corpus(data_paths), ck.tokenizer)
    T = args.seq_len or (ck.train_config.seq_len if ck.train_config else ck.model_config.max_seq_len)
    report = evaluate(ck.params, plan_for(ck.model_config), ck.model_config, tokens, T,
                      max_windows=args.max_windows)
    if args.json:
        print(report.to_json())
    else:
        print(report.to_table())
    return 0


def cmd_generate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    prompt = encode(args.prompt, ck.tokenizer)
    ids = generate(ck.params, plan_for(ck.model_config), ck.model_config, prompt, args.max_new,
                   args.temperature, args.top_k, args.seed if args.seed is not None else 0)
    if args.json:
        print(json.dumps({"ids": ids.tolist(), "text": decode(ids, ck.tokenizer)}))
    else:
        print(decode(ids, ck.tokenizer))
    return 0


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


def cmd_sweep(args) -> int:
    mcfg, tcfg, extra = resolve(args)
    data_paths = args.data or extra.get("data")
    if not data_paths:
        raise UsageError("sweep needs --data FILE [FILE ...]")
    out = _require_out(args)
    text = read_corpus(data_paths)
    tok = _tokenizer_for(args.tokenizer, text, extra)
    mcfg = replace(mcfg, vocab_size=tok.vocab_size)
    grid = SweepGrid(
        hidden_sizes=tuple(args.hidden_sizes or [mcfg.hidden_size]),
        group_counts=tuple(args.group_counts or [mcfg.group_count]),
        sharing_modes=tuple(args.modes or [mcfg.sharing_mode]),
        factorize=tuple(_bool(s) for s in (args.factorize or [str(mcfg.factorize_embedding)])),
        base_model=mcfg, base_train=tcfg,
        steps_per_cell=args.steps or tcfg.max_steps,
        eval_windows=tcfg.eval_windows,
    )
    cells = grid.cells()  # fail fast before any training
    manifest = {"version": __version__, "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                "data": [str(p) for p in data_paths], "tokenizer": tok.to_dict(),
                "grid": {"hidden_sizes": grid.hidden_sizes, "group_counts": grid.group_counts,
                         "sharing_modes": grid.sharing_modes, "factorize": grid.factorize,
                         "steps_per_cell": grid.steps_per_cell, "cells": len(cells)}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    split = split_corpus(encode(text, tok), tcfg.val_fraction)
    rows = run_sweep(grid, split, out, workers=args.workers)
    if args.json:
        print(json.dumps([r.__dict__ for r in rows]))
    else:
        print((out / "sweep.md").read_text(), end="")
    return 0


def cmd_fit_config(args) -> int:
    mcfg, _, _ = resolve(args)
    space = SearchSpace(
        base=mcfg,
        num_layers=tuple(args.layers or [mcfg.num_layers]),
        embedding_sizes=tuple(args.embedding_sizes or [mcfg.embedding_size]),
        group_counts=tuple(args.group_counts or [mcfg.group_count]),
        vocab_sizes=tuple(args.vocab_sizes or [mcfg.vocab_size]),
        d_ff_multipliers=tuple(args.ff_mult or [mcfg.d_ff / mcfg.hidden_size]),
    )
    hits = fit_config(args.target, space, args.tolerance)
    rows = [{**c.to_dict(), "n_params": param_count(c).total_unique} for c in hits[:args.top]]
    if args.json:
        print(json.dumps(rows))
    else:
        if not rows:
            print("no configuration within tolerance")
        for r in rows:
            print(f"n_params={r['n_params']:,}  L={r['num_layers']} E={r['embedding_size']} "
                  f"G={r['group_count']} V={r['vocab_size']} d_ff={r['d_ff']} H={r['hidden_size']}")
    return 0


def cmd_grad_check(args) -> int:
    results = run_suite(points=args.points, seed=args.seed or 0)
    results["full_model"] = model_grad_check(seed=args.seed or 0)
    ok = all(v < TOLERANCE for v in results.values())
    if args.json:
        print(json.dumps({"tolerance": TOLERANCE, "max_rel_error": results, "ok": ok}))
    else:
        for name, err in results.items():
            print(f"{'PASS' if err < TOLERANCE else 'FAIL'}  {name:22s} {err:.3e}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> ArgParser:
    p = ArgParser(prog="efficio", description="Factorized-embedding, shared-layer GPT toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    def common(sp, config=True, data=False, out=False):
        if config:
            sp.add_argument("--config", help="JSON file with ModelConfig/TrainConfig fields")
            sp.add_argument("--set", action="append", metavar="FIELD=VALUE",
                            help="override a config field (repeatable)")
        if data:
            sp.add_argument("--data", nargs="+", help="UTF-8 text files, concatenated in order")
        if out:
            sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = sub.add_parser("count-params", help="exact unique/logical parameter counts")
    common(sp)
    sp.set_defaults(func=cmd_count_params)

    sp = sub.add_parser("train", help="train a model and write manifest, loss CSV, checkpoints")
    common(sp, data=True, out=True)
    sp.add_argument("--tokenizer", choices=("byte", "char"), default="byte")
    sp.add_argument("--max-steps", dest="max_steps", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="perplexity and last-token accuracy")
    common(sp, config=False, data=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--max-windows", dest="max_windows", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("generate", help="sample a continuation")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--max-new", dest="max_new", type=int, default=64)
    sp.add_argument("--temperature", type=float, default=0.0)
    sp.add_argument("--top-k", dest="top_k", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("sweep", help="grid over width, groups, modes and factorization")
    common(sp, data=True, out=True)
    sp.add_argument("--tokenizer", choices=("byte", "char"), default="byte")
    sp.add_argument("--hidden-sizes", dest="hidden_sizes", type=int, nargs="+")
    sp.add_argument("--group-counts", dest="group_counts", type=int, nargs="+")
    sp.add_argument("--modes", nargs="+")
    sp.add_argument("--factorize", nargs="+", help="true/false values")
    sp.add_argument("--steps", type=int, help="step budget per cell")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("fit-config", help="search configs matching a parameter count")
    common(sp)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--tolerance", type=float, default=0.01)
    sp.add_argument("--layers", type=int, nargs="+")
    sp.add_argument("--embedding-sizes", dest="embedding_sizes", type=int, nargs="+")
    sp.add_argument("--group-counts", dest="group_counts", type=int, nargs="+")
    sp.add_argument("--vocab-sizes", dest="vocab_sizes", type=int, nargs="+")
    sp.add_argument("--ff-mult", dest="ff_mult", type=float, nargs="+")
    sp.add_argument("--top", type=int, default=20)
    sp.set_defaults(func=cmd_fit_config)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"efficio: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"efficio: numerical abort: {exc}", file=sys.stderr)
        return exc.exit_code
    except EfficioError as exc:
        print(f"efficio: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"efficio: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
