# test_patching.py
import numpy as np
import pytest

from p1_config import PatchConfig, PatchMode, ShapeError
from p2_tensor_core import ParameterSet, Tensor, gradient_check, tensor_sum
from p3_patching import (
    StageFeatures,
    embed,
    init_patching_params,
    partition,
    patch_embed,
    stage_patch_size,
)


@pytest.mark.parametrize(
    "base,stage,expected",
    [(21, 1, 21), (16, 3, 8), (21, 2, 15), (9, 3, 5), (1, 5, 1)],
)
def test_stage_patch_size(base, stage, expected):
    assert stage_patch_size(base, stage) == expected


def test_stage_patch_size_never_grows_with_depth():
    for base in range(1, 65):
        sizes = [stage_patch_size(base, stage) for stage in range(1, 8)]
        assert sizes[0] == base
        assert all(later <= earlier for earlier, later in zip(sizes, sizes[1:])), (base, sizes)
        assert min(sizes) >= 1


def test_partition_pools_row_major():
    features = StageFeatures(1, Tensor(np.arange(16.0).reshape(1, 4, 4)))
    tokens = partition(features, PatchConfig(token_grid=2))
    assert tokens.tokens.shape == (4, 1)
    assert tokens.tokens.numpy()[:, 0].tolist() == [2.5, 4.5, 10.5, 12.5]


def test_partition_follows_a_transposed_map(rng):
    for side, grid in [(8, 4), (8, 3), (6, 2), (5, 5)]:
        values = rng.normal(size=(3, side, side))
        cfg = PatchConfig(token_grid=grid)
        tokens = partition(StageFeatures(1, Tensor(values)), cfg).tokens.numpy()
        flipped = partition(StageFeatures(1, Tensor(values.transpose(0, 2, 1))), cfg).tokens.numpy()
        order = [c * grid + r for r in range(grid) for c in range(grid)]
        np.testing.assert_allclose(flipped, tokens[order], atol=1e-12)


def test_partition_keeps_batch_axis(rng):
    features = StageFeatures(2, Tensor(rng.normal(size=(3, 5, 8, 8))))
    tokens = partition(features, PatchConfig(token_grid=4))
    assert tokens.tokens.shape == (3, 16, 5)
    assert tokens.num_tokens == 16 and tokens.channels == 5


def test_token_count_is_the_same_across_stages(rng):
    for _ in range(10):
        grid = int(rng.integers(1, 5))
        cfg = PatchConfig(token_grid=grid)
        counts = set()
        for stage in range(1, 4):
            side = int(rng.integers(grid, grid + 20))
            features = StageFeatures(stage, Tensor(rng.normal(size=(int(rng.integers(1, 6)), side, side + 1))))
            counts.add(partition(features, cfg).num_tokens)
        assert counts == {grid * grid}


def test_partition_rejects_grid_larger_than_map(rng):
    features = StageFeatures(3, Tensor(rng.normal(size=(2, 3, 3))))
    with pytest.raises(ShapeError):
        partition(features, PatchConfig(token_grid=4))


def test_embed_is_pointwise(rng):
    params = ParameterSet()
    init_patching_params(params, [(3, 8, 8)], PatchConfig(token_grid=2), rng)
    features = StageFeatures(1, Tensor(rng.normal(size=(3, 8, 8))))
    tokens = partition(features, PatchConfig(token_grid=2))
    out = embed(tokens, params).tokens.numpy()
    w, b = params["embed.1.weight"].data, params["embed.1.bias"].data
    np.testing.assert_allclose(out, tokens.tokens.numpy() @ w.T + b)
    assert out.shape == (4, 3)


def test_embed_rejects_width_mismatch(rng):
    params = ParameterSet()
    init_patching_params(params, [(3, 8, 8)], PatchConfig(token_grid=2), rng)
    features = StageFeatures(1, Tensor(rng.normal(size=(5, 8, 8))))
    with pytest.raises(ShapeError):
        embed(partition(features, PatchConfig(token_grid=2)), params)


def test_convolutional_mode(rng):
    cfg = PatchConfig(token_grid=2, mode=PatchMode.CONVOLUTIONAL)
    params = ParameterSet()
    init_patching_params(params, [(3, 5, 5)], cfg, rng)
    assert params["patch.1.weight"].shape == (3, 3, 2, 2)
    features = StageFeatures(1, Tensor(rng.normal(size=(2, 3, 5, 5))))
    tokens = patch_embed(features, cfg, params)
    assert tokens.tokens.shape == (2, 4, 3)
    with pytest.raises(ShapeError):
        partition(features, cfg)


def test_patch_embed_gradients(rng):
    cfg = PatchConfig(token_grid=2, mode=PatchMode.CONVOLUTIONAL)
    params = ParameterSet()
    init_patching_params(params, [(2, 4, 4)], cfg, rng)
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    w = rng.normal(size=(4, 2))

    def loss():
        return tensor_sum(patch_embed(StageFeatures(1, x), cfg, params).tokens * w)

    errors = gradient_check(loss, {"x": x, "patch": params["patch.1.weight"], "embed": params["embed.1.weight"]})
    assert max(errors.values()) < 1e-6
