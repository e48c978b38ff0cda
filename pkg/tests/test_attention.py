# test_attention.py
import numpy as np
import pytest

from p1_config import ConfigError, ContractError, FusionMode, ShapeError
from p2_tensor_core import ParameterSet, Tensor, gelu, gradient_check, layer_norm, linear, softmax, tensor_sum
from p3_patching import PatchTokens
from p4_attention import (
    BlockState,
    channel_cross_attention,
    cstf_block,
    fuse,
    init_attention_params,
    scaled_attention,
    spatial_cross_attention,
)


def _stage_params(rng, widths, dim=4):
    params = ParameterSet()
    stages = [init_attention_params(params, i, c, dim, rng) for i, c in enumerate(widths, start=1)]
    return params, stages


def _tokens(rng, widths, num_tokens=4, lead=()):
    return [
        PatchTokens(i, Tensor(rng.normal(size=(*lead, num_tokens, c)), requires_grad=True))
        for i, c in enumerate(widths, start=1)
    ]


# --- scaled attention ---
def test_single_token_returns_its_value(rng):
    v = Tensor(rng.normal(size=(1, 3)))
    out = scaled_attention(Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(1, 2))), v)
    np.testing.assert_allclose(out.numpy(), v.numpy())


def test_zero_queries_average_the_values(rng):
    v = rng.normal(size=(5, 3))
    out = scaled_attention(Tensor(np.zeros((5, 2))), Tensor(np.zeros((5, 2))), Tensor(v))
    np.testing.assert_allclose(out.numpy(), np.tile(v.mean(axis=0), (5, 1)))


def test_peaked_query_selects_one_value(rng):
    keys = np.eye(3) * 100.0
    v = rng.normal(size=(3, 2))
    query = np.array([[0.0, 100.0, 0.0]])
    out = scaled_attention(Tensor(query), Tensor(keys), Tensor(v))
    np.testing.assert_allclose(out.numpy()[0], v[1], atol=1e-9)


def test_attention_weights_are_row_stochastic(rng):
    weights = []
    q, k, v = (Tensor(rng.normal(size=(2, 6, 4))) for _ in range(3))
    scaled_attention(q, k, v, weights)
    np.testing.assert_allclose(weights[0].numpy().sum(axis=-1), 1.0)
    expected = softmax(np.einsum("npc,nqc->npq", q.data, k.data) / 2.0, axis=-1).numpy()
    np.testing.assert_allclose(weights[0].numpy(), expected)


def test_attention_is_permutation_equivariant(rng):
    for _ in range(20):
        num_tokens, width = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        q, k, v = (rng.normal(size=(num_tokens, width)) for _ in range(3))
        order = rng.permutation(num_tokens)
        out = scaled_attention(Tensor(q), Tensor(k), Tensor(v)).numpy()
        permuted = scaled_attention(Tensor(q[order]), Tensor(k[order]), Tensor(v[order])).numpy()
        np.testing.assert_allclose(permuted, out[order], atol=1e-12)
        # reordering keys with their values alone changes nothing
        keys_only = scaled_attention(Tensor(q), Tensor(k[order]), Tensor(v[order])).numpy()
        np.testing.assert_allclose(keys_only, out, atol=1e-12)


def test_attention_rejects_empty_and_mismatched(rng):
    with pytest.raises(ShapeError):
        scaled_attention(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))
    with pytest.raises(ShapeError):
        scaled_attention(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


# --- channel cross-attention ---
def test_channel_attention_single_stage_with_identity_output(rng):
    params, stages = _stage_params(rng, [4], dim=4)
    params.assign("cstf.1.ca.out", np.eye(4))
    tokens = _tokens(rng, [4])
    out = channel_cross_attention(tokens, stages)[0].tokens.numpy()
    x = tokens[0].tokens
    p = stages[0]
    expected = scaled_attention(linear(x, p.ca_query), linear(x, p.ca_key), linear(x, p.ca_value)).numpy()
    np.testing.assert_allclose(out, expected)


def test_channel_attention_sums_over_stages(rng):
    params, stages = _stage_params(rng, [3, 5, 6])
    tokens = _tokens(rng, [3, 5, 6])
    out = channel_cross_attention(tokens, stages)
    assert [o.tokens.shape for o in out] == [(4, 3), (4, 5), (4, 6)]
    total = sum(
        scaled_attention(linear(t.tokens, p.ca_query), linear(t.tokens, p.ca_key), linear(t.tokens, p.ca_value)).numpy()
        for t, p in zip(tokens, stages)
    )
    for o, p in zip(out, stages):
        np.testing.assert_allclose(o.tokens.numpy(), total @ p.ca_out.data.T)


def test_channel_attention_rejects_unequal_token_counts(rng):
    _, stages = _stage_params(rng, [3, 5])
    tokens = [
        PatchTokens(1, Tensor(rng.normal(size=(4, 3)))),
        PatchTokens(2, Tensor(rng.normal(size=(9, 5)))),
    ]
    with pytest.raises(ContractError):
        channel_cross_attention(tokens, stages)


def test_channel_attention_rejects_unequal_projection_widths(rng):
    params = ParameterSet()
    stages = [init_attention_params(params, 1, 3, 4, rng), init_attention_params(params, 2, 5, 6, rng)]
    with pytest.raises(ContractError):
        channel_cross_attention(_tokens(rng, [3, 5]), stages)


# --- spatial cross-attention ---
def test_spatial_attention_shape_and_values(rng):
    _, stages = _stage_params(rng, [5])
    tokens = _tokens(rng, [5], lead=(2,))[0]
    out = spatial_cross_attention(tokens, stages[0])
    assert out.tokens.shape == (2, 4, 5)
    p, x = stages[0], tokens.tokens
    inner = scaled_attention(linear(x, p.sca_query), linear(x, p.sca_key), linear(x, p.sca_value))
    np.testing.assert_allclose(out.tokens.numpy(), inner.numpy() @ p.sca_up.data.T)


def test_spatial_attention_rejects_width_mismatch(rng):
    _, stages = _stage_params(rng, [5])
    with pytest.raises(ShapeError):
        spatial_cross_attention(_tokens(rng, [3])[0], stages[0])


# --- fusion ---
@pytest.mark.parametrize("mode", list(FusionMode))
def test_fusion_with_zero_branches_is_identity(rng, mode):
    _, stages = _stage_params(rng, [3])
    original = _tokens(rng, [3])[0]
    zero = PatchTokens(1, Tensor(np.zeros((4, 3))))
    stages[0].cat_weight.data[...] = 0.0
    out = fuse(zero, zero, original, mode, stages[0])
    np.testing.assert_allclose(out.tokens.numpy(), original.tokens.numpy())


def test_fusion_arithmetic(rng):
    _, stages = _stage_params(rng, [3])
    p = stages[0]
    t, a, s = (_tokens(rng, [3])[0] for _ in range(3))
    base, ca, sca = t.tokens.numpy(), a.tokens.numpy(), s.tokens.numpy()
    np.testing.assert_allclose(fuse(a, None, t, "ca_only", p).tokens.numpy(), base + ca)
    np.testing.assert_allclose(fuse(None, s, t, "sca_only", p).tokens.numpy(), base + sca)
    np.testing.assert_allclose(fuse(a, s, t, "sum", p).tokens.numpy(), base + ca + sca)
    joined = np.concatenate([ca, sca], axis=-1)
    expected = base + joined @ p.cat_weight.data.T + p.cat_bias.data
    np.testing.assert_allclose(fuse(a, s, t, "concat", p).tokens.numpy(), expected)


def test_fusion_errors(rng):
    _, stages = _stage_params(rng, [3])
    t = _tokens(rng, [3])[0]
    with pytest.raises(ContractError):
        fuse(None, t, t, FusionMode.SUM, stages[0])
    with pytest.raises(ContractError):
        fuse(t, None, t, FusionMode.SCA_ONLY, stages[0])
    with pytest.raises(ConfigError):
        fuse(t, t, t, "blend", stages[0])


# --- block ---
@pytest.mark.parametrize("mode", list(FusionMode))
def test_block_preserves_shapes(rng, mode):
    _, stages = _stage_params(rng, [3, 5, 6])
    tokens = _tokens(rng, [3, 5, 6], lead=(2,))
    state = BlockState(inputs=[])
    outputs = cstf_block(tokens, stages, mode, state)
    assert [o.tokens.shape for o in outputs] == [t.tokens.shape for t in tokens]
    assert [o.stage_index for o in outputs] == [1, 2, 3]
    assert state.outputs is outputs
    for weights in state.attention_weights:
        np.testing.assert_allclose(weights.numpy().sum(axis=-1), 1.0)


def test_block_records_only_the_active_branches(rng):
    _, stages = _stage_params(rng, [3, 5])
    tokens = _tokens(rng, [3, 5])
    ca_state, sca_state = BlockState(inputs=[]), BlockState(inputs=[])
    cstf_block(tokens, stages, "ca_only", ca_state)
    cstf_block(tokens, stages, "sca_only", sca_state)
    assert ca_state.spatial == [None, None] and len(ca_state.attention_weights) == 2
    assert sca_state.enriched == [None, None] and len(sca_state.attention_weights) == 2


@pytest.mark.parametrize("mode", list(FusionMode))
def test_block_without_attention_paths_is_norm_then_gelu(rng, mode):
    params, stages = _stage_params(rng, [3, 5])
    for stage in (1, 2):
        for name in ("ca.out", "sca.up", "cat.weight", "cat.bias"):
            key = f"cstf.{stage}.{name}"
            params.assign(key, np.zeros(params[key].shape))
        params.assign(f"cstf.{stage}.ln_out.gain", rng.normal(size=params[f"cstf.{stage}.ln_out.gain"].shape))
    tokens = _tokens(rng, [3, 5])
    outputs = cstf_block(tokens, stages, mode)
    for out, t, p in zip(outputs, tokens, stages):
        expected = gelu(layer_norm(t.tokens, p.ln_out_gain, p.ln_out_bias)).numpy()
        assert np.array_equal(out.tokens.numpy(), expected)


def test_block_rejects_unknown_mode(rng):
    _, stages = _stage_params(rng, [3])
    with pytest.raises(ConfigError):
        cstf_block(_tokens(rng, [3]), stages, "blend")


# --- gradients ---
def test_branch_gradients(rng):
    params, stages = _stage_params(rng, [3, 5])
    tokens = _tokens(rng, [3, 5])
    w = [rng.normal(size=(4, 3)), rng.normal(size=(4, 5))]

    def ca_loss():
        out = channel_cross_attention(tokens, stages)
        return tensor_sum(out[0].tokens * w[0]) + tensor_sum(out[1].tokens * w[1])

    def sca_loss():
        return tensor_sum(spatial_cross_attention(tokens[1], stages[1]).tokens * w[1])

    ca_inputs = {
        "x1": tokens[0].tokens,
        "x2": tokens[1].tokens,
        "q1": params["cstf.1.ca.query"],
        "out2": params["cstf.2.ca.out"],
    }
    sca_inputs = {"x": tokens[1].tokens, "k": params["cstf.2.sca.key"], "up": params["cstf.2.sca.up"]}
    ca_errors = gradient_check(ca_loss, ca_inputs)
    sca_errors = gradient_check(sca_loss, sca_inputs)
    assert max(ca_errors.values()) < 1e-6
    assert max(sca_errors.values()) < 1e-6


@pytest.mark.parametrize("mode", ["concat", "sequential"])
def test_block_gradients(rng, mode):
    params, stages = _stage_params(rng, [3, 4])
    tokens = _tokens(rng, [3, 4])
    w = [rng.normal(size=(4, 3)), rng.normal(size=(4, 4))]

    def loss():
        out = cstf_block(tokens, stages, mode)
        return tensor_sum(out[0].tokens * w[0]) + tensor_sum(out[1].tokens * w[1])

    errors = gradient_check(
        loss,
        {"x1": tokens[0].tokens, "up": params["cstf.2.sca.up"], "ln": params["cstf.1.ln_in.gain"]},
    )
    assert max(errors.values()) < 1e-6
