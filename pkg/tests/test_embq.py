import numpy as np
import pytest

from flashsloth.embq import (
    CLOSED_GATE, EmbQParams, embq_apply, init_queries, text_query, visual_query,
)
from flashsloth.errors import ContractError, DimensionError
from flashsloth.tensor import Tape, Tensor, backward, tsum
from oracles import attention_weights_oracle, embq_oracle


def _instance(rng, fusion="add", n_layers=1):
    d, dv, de = int(rng.integers(2, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 9))
    n, l, m = int(rng.integers(1, 6)), int(rng.integers(1, 7)), int(rng.integers(1, 12))
    params = EmbQParams.init(d, dv, de, rng, n_layers=n_layers, fusion=fusion)
    if fusion == "gate":
        for layer in params.layers:
            layer.gate_logits.data[:] = rng.standard_normal(d)
    fq, ft, fv = rng.standard_normal((n, d)), rng.standard_normal((l, d)), rng.standard_normal((m, dv))
    return params, fq, ft, fv


def _np_layers(params):
    return [{k: v.data for k, v in layer.tensors().items()} for layer in params.layers]


@pytest.mark.parametrize("fusion", ["add", "replace", "gate"])
def test_matches_double_attention_oracle(fusion):
    rng = np.random.default_rng(hash(fusion) % 1000)
    for _ in range(40):
        params, fq, ft, fv = _instance(rng, fusion, n_layers=int(rng.integers(1, 3)))
        got = embq_apply(Tensor(fq), Tensor(ft), Tensor(fv), params).data
        want = embq_oracle(fq, ft, fv, _np_layers(params), fusion)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_both_attention_stages_are_row_stochastic(rng):
    params, fq, ft, fv = _instance(rng)
    layer = params.layers[0]
    ftq, w_text = text_query(Tensor(fq), Tensor(ft), layer, return_weights=True)
    _, w_vis = visual_query(ftq, Tensor(fv), layer, return_weights=True)
    np.testing.assert_allclose(w_text.data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(w_vis.data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(w_text.data, attention_weights_oracle(fq, ft, layer.text_wq.data, layer.text_wk.data), atol=1e-12)


def test_zero_up_projection_is_a_no_op(rng):
    params, fq, ft, fv = _instance(rng)
    params.layers[0].up_proj.data[:] = 0.0
    assert np.array_equal(embq_apply(Tensor(fq), Tensor(ft), Tensor(fv), params).data, fq)


def test_closed_gate_leaves_queries_nearly_unchanged(rng):
    params, fq, ft, fv = _instance(rng, "gate")
    params.layers[0].gate_logits.data[:] = CLOSED_GATE
    np.testing.assert_allclose(embq_apply(Tensor(fq), Tensor(ft), Tensor(fv), params).data, fq, atol=1e-10)


def test_text_stage_never_sees_visual_tokens(rng):
    params, fq, ft, fv = _instance(rng)
    layer = params.layers[0]
    a = text_query(Tensor(fq), Tensor(ft), layer).data
    # the signature has no visual input at all; also check the full module's text read-out is vision-independent
    with Tape() as tape:
        fvt = Tensor(fv, requires_grad=True)
        ftq = text_query(Tensor(fq), Tensor(ft), layer)
        out = tsum(ftq)
    backward(out, tape, [fvt])
    assert np.all(fvt.grad == 0)
    assert np.array_equal(text_query(Tensor(fq), Tensor(ft), layer).data, a)


def test_visual_stage_depends_on_visual_tokens(rng):
    params, fq, ft, fv = _instance(rng)
    a = embq_apply(Tensor(fq), Tensor(ft), Tensor(fv), params).data
    b = embq_apply(Tensor(fq), Tensor(ft), Tensor(fv + 1.0 + fv**2), params).data
    assert not np.allclose(a, b)


def test_contract_errors(rng):
    params, fq, ft, fv = _instance(rng)
    with pytest.raises(ContractError):
        embq_apply(Tensor(fq), Tensor(np.zeros((0, fq.shape[1]))), Tensor(fv), params)
    with pytest.raises(ContractError):
        embq_apply(Tensor(np.zeros((0, fq.shape[1]))), Tensor(ft), Tensor(fv), params)
    with pytest.raises(DimensionError):
        embq_apply(Tensor(fq), Tensor(ft), Tensor(np.ones((3, fv.shape[1] + 1))), params)
    with pytest.raises(ContractError):
        EmbQParams(params.layers, "multiply")


def test_query_initialisation_modes(rng):
    table = Tensor(rng.standard_normal((258, 6)))
    dot = init_queries(4, table, "dot")
    assert np.array_equal(dot.embeddings.data, np.repeat(table.data[46][None], 4, axis=0))
    assert dot.embeddings.requires_grad and dot.trainable
    fixed = init_queries(4, table, "fixed_dot")
    assert not fixed.embeddings.requires_grad and not fixed.trainable
    r1 = init_queries(3, table, "random", np.random.default_rng(5)).embeddings.data
    r2 = init_queries(3, table, "random", np.random.default_rng(5)).embeddings.data
    assert np.array_equal(r1, r2)
    assert np.array_equal(r1, 0.02 * np.random.default_rng(5).standard_normal((3, 6)))
    assert init_queries(0, table).n == 0
    with pytest.raises(ContractError):
        init_queries(-1, table)
    with pytest.raises(ContractError):
        init_queries(2, table, "zeros")
