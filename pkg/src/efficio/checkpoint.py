"""Binary checkpoint files.

Layout::

    b"GPTE" | u32 LE version (=1) | u64 LE header length | UTF-8 JSON header | payload

The header carries both configs, the step, the dropout rng state and a tensor
directory ``{name, dtype, shape, offset}``; offsets are relative to the start of
the payload, which holds the raw little-endian IEEE-754 tensors in directory
order. Model tensors are followed by the Adam moments (``adam.m/<name>``,
``adam.v/<name>``) when optimizer state is saved.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import TokenizerSpec
from .errors import ConfigError, FormatError
from .model import ModelConfig, ModelParams, init_model
from .trainer import OptimizerState, TrainConfig, TrainState

MAGIC = b"GPTE"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: Optional[TrainConfig]
    params: ModelParams
    state: Optional[TrainState]
    tokenizer: TokenizerSpec
    step: int


def save_checkpoint(path, params: ModelParams, model_config: ModelConfig,
                    train_config: Optional[TrainConfig] = None, state: Optional[TrainState] = None,
                    tokenizer: TokenizerSpec = TokenizerSpec(), dtype: str = "<f8") -> None:
    """Write atomically (temp file + rename). ``dtype='<f4'`` halves the size
    but loses the exact-roundtrip guarantee."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported checkpoint dtype {dtype!r}")
    arrays = [(name, t.data) for name, t in params.named_tensors()]
    if state is not None:
        arrays += [(f"adam.m/{n}", a) for n, a in zip(state.opt.names, state.opt.m)]
        arrays += [(f"adam.v/{n}", a) for n, a in zip(state.opt.names, state.opt.v)]
    directory, offset = [], 0
    for name, a in arrays:
        nbytes = a.size * _DTYPES[dtype].itemsize
        directory.append({"name": name, "dtype": dtype, "shape": list(a.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": VERSION,
        "model_config": model_config.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "tokenizer": tokenizer.to_dict(),
        "step": 0 if state is None else state.step,
        "optimizer": None if state is None else {
            "t": state.opt.t, "best_val": state.best_val, "stale_evals": state.stale_evals},
        "rng_state": None if state is None else state.rng_state,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    """Read and fully validate a checkpoint; nothing is returned on failure."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if start > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
        model_config = ModelConfig.from_dict(header["model_config"])
        tc = header.get("train_config")
        train_config = None if tc is None else TrainConfig.from_dict(tc)
        tokenizer = TokenizerSpec.from_dict(header.get("tokenizer") or {})
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    if header.get("format_version") != version:
        raise FormatError(f"{path}: header version does not match file version")

    payload = memoryview(raw)[start:]
    arrays = {}
    for entry in directory:
        dt = _DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise FormatError(f"{path}: tensor {entry.get('name')!r} has unsupported dtype")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        off = entry["offset"]
        if off < 0 or off + n > len(payload):
            raise FormatError(f"{path}: truncated payload at tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload[off:off + n], dtype=dt).reshape(shape).astype(np.float64)

    # a freshly initialised model supplies the expected names and shapes
    params = init_model(model_config, 0)
    named = params.named_tensors()
    for name, t in named:
        a = arrays.get(name)
        if a is None:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if a.shape != t.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {a.shape}, config implies {t.shape}")
        t.data[...] = a

    state = None
    if header.get("optimizer") is not None:
        opt = OptimizerState.zeros_like(params)
        for i, (name, t) in enumerate(named):
            for which, store in (("m", opt.m), ("v", opt.v)):
                a = arrays.get(f"adam.{which}/{name}")
                if a is None or a.shape != t.shape:
                    raise FormatError(f"{path}: optimizer moment adam.{which}/{name} missing or misshapen")
                store[i][...] = a
        meta = header["optimizer"]
        opt.t = int(meta["t"])
        state = TrainState(opt, int(header["step"]), header["rng_state"],
                           meta.get("best_val"), int(meta.get("stale_evals", 0)))
    return Checkpoint(model_config, train_config, params, state, tokenizer, int(header.get("step", 0)))
