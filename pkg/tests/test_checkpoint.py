import json
import struct

import numpy as np
import pytest
from conftest import SMALL, SMALL_TRAIN

from efficio import (TokenizerSpec, encode, init_model, load_checkpoint, plan_for, save_checkpoint,
                     split_corpus, train)
from efficio.errors import FormatError
from efficio.evaluation import mean_nll


@pytest.fixture(scope="module")
def trained(corpus_text):
    split = split_corpus(encode(corpus_text[:10_000]), 0.1)
    res = train(init_model(SMALL, 0), plan_for(SMALL), SMALL, split, SMALL_TRAIN, max_steps=6)
    return res, split


def test_roundtrip_is_bit_exact(tmp_path, trained):
    res, split = trained
    path = tmp_path / "m.gpte"
    save_checkpoint(path, res.params, SMALL, SMALL_TRAIN, res.state, TokenizerSpec())
    ck = load_checkpoint(path)
    assert ck.model_config == SMALL and ck.train_config == SMALL_TRAIN and ck.step == 6
    for (n, a), (m, b) in zip(res.params.named_tensors(), ck.params.named_tensors()):
        assert n == m
        np.testing.assert_array_equal(a.data, b.data)
    for a, b in zip(res.state.opt.v, ck.state.opt.v):
        np.testing.assert_array_equal(a, b)
    assert ck.state.rng_state == res.state.rng_state and ck.state.opt.t == res.state.opt.t
    plan = plan_for(SMALL)
    before = mean_nll(res.params, plan, SMALL, split.val, 16)
    after = mean_nll(ck.params, plan, SMALL, split.val, 16)
    assert before == after


def test_loaded_grouped_model_keeps_storage_identity(tmp_path, trained):
    res, _ = trained
    save_checkpoint(tmp_path / "m.gpte", res.params, SMALL)
    ck = load_checkpoint(tmp_path / "m.gpte")
    plan = plan_for(SMALL)
    assert ck.params.block(0, plan)[0] is ck.params.block(1, plan)[0]
    assert ck.state is None


def test_layout_prefix(tmp_path, trained):
    save_checkpoint(tmp_path / "m.gpte", trained[0].params, SMALL)
    raw = (tmp_path / "m.gpte").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert (magic, version) == (b"GPTE", 1)
    header = json.loads(raw[16:16 + hlen])
    first = header["tensors"][0]
    assert first["name"] == "word_embed" and first["dtype"] == "<f8" and first["offset"] == 0
    payload = np.frombuffer(raw[16 + hlen:16 + hlen + 8 * 256 * 8], "<f8").reshape(256, 8)
    np.testing.assert_array_equal(payload, trained[0].params.word_embed.data)


def test_float32_option_is_close(tmp_path, trained):
    save_checkpoint(tmp_path / "m.gpte", trained[0].params, SMALL, dtype="<f4")
    ck = load_checkpoint(tmp_path / "m.gpte")
    np.testing.assert_allclose(ck.params.word_embed.data, trained[0].params.word_embed.data, rtol=1e-6)


def _corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(raw)))


@pytest.mark.parametrize("mutate,needle", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
    (lambda r: r[:len(r) - 100], "truncated"),
    (lambda r: r[:10], "truncated|short"),
    (lambda r: r[:16] + b"!" + r[17:], "header"),
])
def test_corrupt_files_are_rejected(tmp_path, trained, mutate, needle):
    path = tmp_path / "m.gpte"
    save_checkpoint(path, trained[0].params, SMALL)
    _corrupt(path, mutate)
    with pytest.raises(FormatError, match=needle):
        load_checkpoint(path)


def test_shape_mismatch_rejected(tmp_path, trained):
    path = tmp_path / "m.gpte"
    save_checkpoint(path, trained[0].params, SMALL)
    raw = path.read_bytes()
    hlen = struct.unpack_from("<Q", raw, 8)[0]
    header = json.loads(raw[16:16 + hlen])
    header["model_config"]["d_ff"] = 64
    blob = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + hlen:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_save_is_atomic_and_leaves_no_temp(tmp_path, trained):
    save_checkpoint(tmp_path / "m.gpte", trained[0].params, SMALL)
    assert [p.name for p in tmp_path.iterdir()] == ["m.gpte"]
