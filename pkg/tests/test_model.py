import numpy as np
import pytest

from conftest import tiny
from flashsloth.errors import CapacityError, ConfigError, ContractError
from flashsloth.model import (
    FlashSloth, ModelConfig, decode_greedy, embq_params, forward, init_params, load_checkpoint, param_group,
    save_checkpoint, scaled_layer,
)
from flashsloth.vision import EOA_ID, synth_features, toy_tokenize
from oracles import embq_oracle, forward_oracle, sap_oracle


def _np(params):
    return {k: v.data for k, v in params.items()}


def _embeddings_oracle(model, image, text, answer_ids):
    """Input rows built by hand: SAP -> projector, text rows, query rows, answer rows."""
    P, c = _np(model.params), model.config
    pooled = sap_oracle(image.to_array(), P["sap.w1"], P["sap.b1"], P["sap.w2"], P["sap.b2"], c.s)
    visual = pooled.reshape(-1, c.d_vis) @ P["projector"]
    ids = toy_tokenize(text)
    rows = [visual, P["embed"][ids]]
    if c.n_queries:
        rows.append(P["queries"])
    rows.append(P["embed"][answer_ids])
    return np.concatenate(rows), visual.shape[0], len(ids)


@pytest.mark.parametrize("fusion", ["add", "gate"])
def test_forward_matches_loop_oracle(fusion):
    model = FlashSloth(tiny(fusion=fusion, seed=3))
    image = synth_features(11, 6, 6, 4)
    seq = model.sequence(image, "Which?", "tl")
    x0, n_vis, n_text = _embeddings_oracle(model, image, "Which?", seq.turns[0].answer_ids)
    P = _np(model.params)
    t0, q0 = n_vis, n_vis + n_text
    q1 = q0 + model.config.n_queries
    layers = [{k.split(".")[-1]: v for k, v in P.items() if k.startswith("embq.1.0.")}]

    def hook(x, _):
        x = x.copy()
        x[q0:q1] = embq_oracle(x[q0:q1], x[t0:q0], image.to_array().reshape(-1, 4), layers, fusion)
        return x

    want = forward_oracle(x0, P, 2, 2, hook_layers=(1,), hook=hook)
    np.testing.assert_allclose(model.logits(seq).data, want, rtol=0, atol=1e-10)


def test_causality_future_token_change():
    model = FlashSloth(tiny(seed=1))
    image = synth_features(2, 6, 6, 4)
    a = model.sequence(image, "Which quadrant?", "tl")
    b = model.sequence(image, "Which quadrant?", "tr")
    la, lb = model.logits(a).data, model.logits(b).data
    changed = a.turn_spans()[0][4] + 1  # second answer byte differs
    np.testing.assert_allclose(la[:changed], lb[:changed], rtol=0, atol=1e-12)
    assert not np.allclose(la[changed:], lb[changed:])


def test_hook_only_touches_query_rows_at_its_layer():
    model = FlashSloth(tiny(n_layers=3, embq_layer=2, seed=2))
    seq = model.sequence(synth_features(5, 6, 6, 4), "Which?", "br")
    on, off = [], []
    model.logits(seq, trace=on)
    model.logits(seq, hook=False, trace=off)
    _, _, q0, q1, _, _ = seq.turn_spans()[0]
    block2_on = next(a for k, stage, a in on if k == 2 and stage == "block")
    hooked = next(a for k, stage, a in on if k == 2 and stage == "hook")
    block2_off = next(a for k, stage, a in off if k == 2)
    assert np.array_equal(block2_on, block2_off)
    assert np.array_equal(np.delete(hooked, np.s_[q0:q1], axis=0), np.delete(block2_on, np.s_[q0:q1], axis=0))
    assert not np.allclose(hooked[q0:q1], block2_on[q0:q1])
    final_on = next(a for k, _, a in on if k == 3)
    final_off = next(a for k, _, a in off if k == 3)
    assert np.array_equal(final_on[:q0], final_off[:q0])


def test_kv_cache_decoding_equals_recompute():
    model = FlashSloth(tiny(seed=4))
    rng = np.random.default_rng(0)
    for _ in range(20):
        image = synth_features(int(rng.integers(1000)), 6, 6, 4)
        text = "".join(chr(int(c)) for c in rng.integers(97, 123, size=int(rng.integers(1, 8))))
        prompt = model.sequence(image, text)
        cached = decode_greedy(prompt, model.params, model.config, 8, use_cache=True)
        full = decode_greedy(prompt, model.params, model.config, 8, use_cache=False)
        assert cached == full


def test_decode_stops_at_end_of_answer():
    model = FlashSloth(tiny(seed=0))
    model.params["lm_head"].data[:] = 0.0
    model.params["lm_head"].data[:, EOA_ID] = 1.0  # argmax is always end-of-answer
    model.params["ln_f.b"].data[:] = 1.0
    assert model.generate(synth_features(0, 6, 6, 4), "hi") == []


def test_token_layout_default_and_hd():
    model = FlashSloth(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=16, d_vis=4, embq_layer=1, embq_dim=8))
    seq = model.sequence(synth_features(0, 27, 27, 4), "abc")
    assert [(t, b - a) for t, a, b in seq.segments()] == [("visual", 81), ("text", 3), ("query", 9)]
    hd = FlashSloth(model.config.replace(hd=True))
    seq = hd.sequence(synth_features(0, 54, 54, 4), "abc")
    assert seq.visual.shape[0] == 405 and seq.n_queries == 9
    assert seq.raw_visual.shape[0] == 5 * 729


def test_multi_turn_spans_and_loss_positions():
    model = FlashSloth(tiny())
    seq = model.sequence(synth_features(0, 6, 6, 4), "ab", "tl", more_turns=[("cde", "br")])
    spans = seq.turn_spans()
    assert spans[0] == (4, 6, 6, 8, 8, 11)
    assert spans[1] == (11, 14, 14, 16, 16, 19)
    assert len(seq) == 19 and seq.tags().count("query") == 4
    assert model.logits(seq).shape == (19, 258)


def test_no_queries_means_no_query_module():
    params = init_params(tiny(n_queries=0))
    assert not any(k.startswith("embq.") or k == "queries" for k in params)
    model = FlashSloth(tiny(n_queries=0), params)
    seq = model.sequence(synth_features(0, 6, 6, 4), "a", "b")
    assert seq.n_queries == 0 and model.logits(seq).shape[0] == len(seq)


def test_capacity_and_validation():
    model = FlashSloth(tiny(max_seq=8))
    with pytest.raises(CapacityError):
        model.logits(model.sequence(synth_features(0, 6, 6, 4), "long text"))
    for bad in (dict(d_model=9), dict(grid=7), dict(embq_layer=5), dict(fusion="mul"), dict(n_queries=-1)):
        with pytest.raises(ConfigError):
            tiny(**bad)


def test_param_groups_and_layer_scaling():
    assert param_group("blocks.0.attn.wq") == "llm"
    assert param_group("embed") == "llm"
    assert param_group("sap.w1") == "sap"
    assert param_group("ldp.depthwise") == "compressor"
    assert param_group("embq.8.0.up_proj") == "embq"
    assert [scaled_layer(k, 12) for k in (4, 8, 16, 24)] == [2, 3, 6, 9]
    assert scaled_layer(8, 32) == 8 and scaled_layer(1, 4) == 1


def test_multi_hook_layers_own_fresh_parameters():
    cfg = tiny(n_layers=3, embq_layer=(1, 3), embq_n_layers=2)
    params = init_params(cfg)
    a, b = embq_params(params, cfg, 1), embq_params(params, cfg, 3)
    assert a.n_layers == b.n_layers == 2
    assert not np.array_equal(a.layers[0].text_wq.data, b.layers[0].text_wq.data)


def test_config_text_and_checkpoint_roundtrip(tmp_path):
    cfg = tiny(embq_layer=(1, 2), fusion="gate", sap_hidden=3)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    model = FlashSloth(cfg)
    save_checkpoint(tmp_path / "m.slth", cfg, model.params)
    cfg2, params2 = load_checkpoint(tmp_path / "m.slth")
    assert cfg2 == cfg and sorted(params2) == sorted(model.params)
    assert all(np.array_equal(params2[k].data, model.params[k].data) for k in params2)
    (tmp_path / "x").write_bytes(b"NOPE")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x")


def test_generation_is_deterministic():
    a = FlashSloth(tiny(seed=9)).generate(synth_features(1, 6, 6, 4), "q?", 5)
    b = FlashSloth(tiny(seed=9)).generate(synth_features(1, 6, 6, 4), "q?", 5)
    assert a == b
