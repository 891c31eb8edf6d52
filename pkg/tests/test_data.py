import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efficio.data import (TokenizerSpec, batch_at, batches_per_epoch, decode, encode, eval_windows,
                          make_batches, read_corpus, split_corpus)
from efficio.errors import ConfigError, DataError


@settings(max_examples=100, deadline=None)
@given(st.text())
def test_byte_roundtrip(text):
    ids = encode(text)
    assert ids.min(initial=0) >= 0 and ids.max(initial=0) < 256
    assert decode(ids) == text


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1))
def test_char_vocab_roundtrip(text):
    spec = TokenizerSpec.from_corpus(text)
    assert decode(encode(text, spec), spec) == text
    assert spec.vocab_size == len(set(text)) + 1


def test_char_vocab_unknown_maps_to_reserved_id():
    spec = TokenizerSpec.from_corpus("abc")
    assert encode("abz", spec).tolist() == [0, 1, 3]


def test_decode_rejects_out_of_range():
    with pytest.raises(DataError):
        decode([256])


def test_split_is_contiguous_tail():
    s = split_corpus(np.arange(100), 0.1)
    assert s.train.tolist() == list(range(90)) and s.val.tolist() == list(range(90, 100))
    with pytest.raises(ConfigError):
        split_corpus(np.arange(10), 1.0)


def test_batches_cover_every_window_once_per_epoch():
    toks = np.arange(1 + 10 * 4)  # 10 windows of T=4
    batches = make_batches(toks, B=3, T=4, seed=1)
    assert [b.inputs.shape[0] for b in batches] == [3, 3, 3, 1]
    firsts = sorted(int(b.inputs[i, 0]) for b in batches for i in range(b.inputs.shape[0]))
    assert firsts == list(range(0, 40, 4))
    for b in batches:
        np.testing.assert_array_equal(b.targets, b.inputs + 1)


def test_batch_order_is_seeded_and_reshuffled_per_epoch():
    toks = np.arange(1 + 64 * 4)
    a = make_batches(toks, 8, 4, seed=3, epoch=0)
    b = make_batches(toks, 8, 4, seed=3, epoch=0)
    c = make_batches(toks, 8, 4, seed=3, epoch=1)
    assert all(np.array_equal(x.inputs, y.inputs) for x, y in zip(a, b))
    assert not all(np.array_equal(x.inputs, y.inputs) for x, y in zip(a, c))


def test_step_indexed_batches_match_epoch_batches():
    toks = np.arange(1 + 10 * 4)
    per = batches_per_epoch(len(toks), 3, 4)
    epoch1 = make_batches(toks, 3, 4, seed=2, epoch=1)
    for i in range(per):
        np.testing.assert_array_equal(batch_at(toks, 3, 4, 2, per + i).inputs, epoch1[i].inputs)


def test_short_corpus_is_a_data_error():
    with pytest.raises(DataError):
        make_batches(np.arange(4), 2, 4)
    with pytest.raises(DataError):
        eval_windows(np.arange(3), 4)


def test_read_corpus_concatenates_and_validates(tmp_path):
    (tmp_path / "a.txt").write_text("ab")
    (tmp_path / "b.txt").write_text("cd")
    assert read_corpus([tmp_path / "a.txt", tmp_path / "b.txt"]) == "abcd"
    (tmp_path / "bad.txt").write_bytes(b"\xff\xfe\xfa")
    with pytest.raises(DataError):
        read_corpus([tmp_path / "bad.txt"])
    with pytest.raises(DataError):
        read_corpus([tmp_path / "missing.txt"])
