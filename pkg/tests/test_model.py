import numpy as np
import pytest
from conftest import SMALL, TOY
from hypothesis import given, settings
from hypothesis import strategies as st

from efficio import (ModelConfig, build_sharing_plan, count_enumerated, forward, init_model,
                     param_count, plan_for)
from efficio.errors import ConfigError, DataError
from efficio.model import ATTN_TENSORS, FFN_TENSORS


def test_toy_config_has_232_parameters():
    report = param_count(TOY)
    assert report.total_unique == 232
    assert count_enumerated(init_model(TOY, 0)) == 232


def test_toy_breakdown_by_hand():
    # V*E + E*H, T*H, one attention set, one FFN set, final norm
    r = param_count(TOY)
    assert (r.embedding_params, r.positional_params) == (10 * 2 + 2 * 4, 6 * 4)
    assert r.block_params_unique == (4 * 16 + 4 * 4 + 2 * 4) + (4 * 8 + 8 + 8 * 4 + 4 + 2 * 4)
    assert r.block_params_logical == 2 * r.block_params_unique
    assert r.head_params == 0 and r.final_norm_params == 8


def test_factorized_embedding_counts():
    base = dict(vocab_size=50257, embedding_size=128, hidden_size=2048, num_layers=1, num_heads=16,
                d_ff=8192, max_seq_len=8, sharing_mode="none", group_count=1)
    assert param_count(ModelConfig(**base)).embedding_params == 6_695_040
    full = ModelConfig(**{**base, "factorize_embedding": False})
    assert param_count(full).embedding_params == 102_926_336


def test_gpt3_shaped_total_close_to_175b():
    cfg = ModelConfig(vocab_size=50257, embedding_size=12288, hidden_size=12288, num_layers=96,
                      num_heads=96, d_ff=4 * 12288, max_seq_len=2048, sharing_mode="none",
                      group_count=1, factorize_embedding=False, tie_output_head=False)
    total = param_count(cfg).total_unique
    assert abs(total / 1.75e11 - 1) < 0.02


def test_grouped_plan_is_contiguous():
    assert build_sharing_plan(4, "grouped", 2).layer_to_attn_group == (0, 0, 1, 1)
    assert build_sharing_plan(5, "grouped", 2).layer_to_attn_group == (0, 0, 0, 1, 1)
    assert build_sharing_plan(3, "attn_only").layer_to_attn_group == (0, 0, 0)
    assert build_sharing_plan(3, "attn_only").layer_to_ffn_group == (0, 1, 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.data())
def test_grouped_plan_properties(L, data):
    G = data.draw(st.integers(1, L))
    groups = build_sharing_plan(L, "grouped", G).layer_to_attn_group
    assert sorted(set(groups)) == list(range(G))
    assert list(groups) == sorted(groups)
    sizes = np.bincount(groups)
    assert sizes.max() - sizes.min() <= 1


@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 4), H_heads=st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 2)]),
       E=st.integers(1, 4), V=st.integers(2, 12), mode=st.sampled_from(
           ["none", "all", "attn_only", "ffn_only", "grouped"]),
       fac=st.booleans(), tied=st.booleans(), data=st.data())
def test_formula_matches_enumeration(L, H_heads, E, V, mode, fac, tied, data):
    H, heads = H_heads
    G = data.draw(st.integers(1, L))
    cfg = ModelConfig(vocab_size=V, embedding_size=min(E, H), hidden_size=H, num_layers=L,
                      num_heads=heads, d_ff=2 * H, max_seq_len=3, sharing_mode=mode,
                      group_count=G, factorize_embedding=fac, tie_output_head=tied)
    params = init_model(cfg, 0)
    report = param_count(cfg)
    assert report.total_unique == count_enumerated(params)
    assert report.unique_tensors == len({id(t) for t in params.tensors()})
    assert report.total_logical >= report.total_unique


def test_unique_tensor_count_for_grouped_model():
    r = param_count(SMALL)
    assert r.unique_tensors == 2 + 1 + 2 + 2 * (ATTN_TENSORS + FFN_TENSORS)


@pytest.mark.parametrize("field,value,needle", [
    ("group_count", 5, "group_count"), ("num_heads", 3, "num_heads"),
    ("embedding_size", 32, "embedding_size"), ("sharing_mode", "some", "sharing_mode"),
    ("activation", "tanh", "activation"), ("dropout_rate", 1.0, "dropout_rate"),
    ("vocab_size", 0, "vocab_size")])
def test_invalid_configs_name_the_field(field, value, needle):
    with pytest.raises(ConfigError, match=needle):
        ModelConfig(**{**SMALL.to_dict(), field: value})


def test_config_dict_roundtrip_and_unknown_keys():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ConfigError, match="hiden_size"):
        ModelConfig.from_dict({"hiden_size": 4})


def test_init_is_seeded():
    a, b, c = init_model(SMALL, 3), init_model(SMALL, 3), init_model(SMALL, 4)
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x.data, y.data)
    assert not np.array_equal(a.word_embed.data, c.word_embed.data)


def test_grouped_layers_share_storage():
    params, plan = init_model(SMALL, 0), plan_for(SMALL)
    assert params.block(0, plan)[0] is params.block(1, plan)[0]
    assert params.block(1, plan)[1] is params.block(0, plan)[1]
    assert params.block(1, plan)[0] is not params.block(2, plan)[0]


def test_forward_shapes_and_1d_input():
    params, plan = init_model(SMALL, 0), plan_for(SMALL)
    toks = np.arange(10).reshape(2, 5)
    assert forward(params, plan, SMALL, toks).shape == (2, 5, 256)
    assert forward(params, plan, SMALL, np.arange(5)).shape == (1, 5, 256)


def test_forward_is_causal():
    params, plan = init_model(SMALL, 0), plan_for(SMALL)
    a = np.array([[1, 2, 3, 4, 5]])
    b = np.array([[1, 2, 3, 200, 9]])
    np.testing.assert_array_equal(forward(params, plan, SMALL, a).data[:, :3],
                                  forward(params, plan, SMALL, b).data[:, :3])


@pytest.mark.parametrize("tokens", [np.array([[0, 256]]), np.zeros((1, 17), dtype=int),
                                    np.array([[0.5, 1.0]])])
def test_forward_rejects_bad_tokens(tokens):
    params, plan = init_model(SMALL, 0), plan_for(SMALL)
    with pytest.raises(DataError):
        forward(params, plan, SMALL, tokens)
