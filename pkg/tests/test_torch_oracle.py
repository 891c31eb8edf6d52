"""Cross-check the numpy forward and backward against an independent torch
implementation of the same architecture (float64)."""

import numpy as np
import pytest

from efficio import ModelConfig, forward, init_model, plan_for
from efficio.trainer import loss_and_grads

torch = pytest.importorskip("torch")
F = torch.nn.functional


def torch_logits(params, plan, cfg, tokens):
    named = dict(params.named_tensors())
    t = {k: torch.tensor(v.data, dtype=torch.float64, requires_grad=True) for k, v in named.items()}
    ids = torch.tensor(tokens)
    B, T = ids.shape
    H, nh = cfg.hidden_size, cfg.num_heads
    x = t["word_embed"][ids]
    if "embed_proj" in t:
        x = x @ t["embed_proj"]
    x = x + t["pos_embed"][:T]
    for i in range(cfg.num_layers):
        a, f = f"attn.{plan.layer_to_attn_group[i]}.", f"ffn.{plan.layer_to_ffn_group[i]}."
        h = F.layer_norm(x, (H,), t[a + "ln_gain"], t[a + "ln_bias"], eps=1e-5)
        q, k, v = (h @ t[a + f"w_{n}"] + t[a + f"b_{n}"] for n in "qkv")
        split = lambda z: z.view(B, T, nh, H // nh).transpose(1, 2)
        ctx = F.scaled_dot_product_attention(split(q), split(k), split(v), is_causal=True)
        ctx = ctx.transpose(1, 2).reshape(B, T, H)
        x = x + ctx @ t[a + "w_o"] + t[a + "b_o"]
        h = F.layer_norm(x, (H,), t[f + "ln_gain"], t[f + "ln_bias"], eps=1e-5)
        act = F.gelu(h @ t[f + "w1"] + t[f + "b1"], approximate="tanh")
        x = x + act @ t[f + "w2"] + t[f + "b2"]
    h = F.layer_norm(x, (H,), t["final_ln.gain"], t["final_ln.bias"], eps=1e-5)
    if "head" in t:
        return h @ t["head"], t
    if "embed_proj" in t:
        h = h @ t["embed_proj"].T
    return h @ t["word_embed"].T, t


@pytest.mark.parametrize("mode,G,factorized,tied", [
    ("grouped", 2, True, True), ("none", 1, False, False), ("all", 1, True, False),
    ("attn_only", 1, False, True), ("ffn_only", 1, True, True)])
def test_forward_and_gradients_match_torch(mode, G, factorized, tied):
    cfg = ModelConfig(vocab_size=11, embedding_size=3, hidden_size=8, num_layers=4, num_heads=2,
                      d_ff=12, max_seq_len=7, sharing_mode=mode, group_count=G,
                      factorize_embedding=factorized, tie_output_head=tied)
    params, plan = init_model(cfg, 5), plan_for(cfg)
    rng = np.random.Generator(np.random.PCG64(9))
    for p in params.tensors():  # larger weights so every path contributes
        p.data[...] = 0.3 * rng.normal(size=p.shape)
    tokens = rng.integers(0, 11, size=(3, 7))
    ours = forward(params, plan, cfg, tokens[:, :-1]).data
    ref, t = torch_logits(params, plan, cfg, tokens[:, :-1])
    np.testing.assert_allclose(ours, ref.detach().numpy(), rtol=1e-11, atol=1e-12)

    loss, grads = loss_and_grads(params, plan, cfg, tokens[:, :-1], tokens[:, 1:])
    ref_loss = F.cross_entropy(ref.reshape(-1, 11), torch.tensor(tokens[:, 1:]).reshape(-1))
    ref_loss.backward()
    assert loss == pytest.approx(ref_loss.item(), rel=1e-12)
    for (name, _), g in zip(params.named_tensors(), grads):
        np.testing.assert_allclose(g, t[name].grad.numpy(), rtol=1e-9, atol=1e-12, err_msg=name)
