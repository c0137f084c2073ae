from __future__ import annotations

import math

import numpy as np
import pytest

from smmix import autodiff as ad
from smmix.autodiff import Tensor
from smmix.gradcheck import gradcheck
from smmix.vit import (ConfigError, ModelConfig, NonFiniteActivationError, VisionTransformer,
                       image_attention_score, image_attention_scores, init_params, parameter_count,
                       parameter_shapes, parameter_tensor_count, patchify, standardize_images, unpatchify)

from conftest import TINY, randomize_head, tiny_model


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(depth=0)
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(depth=2, attention_block=3)
    assert ModelConfig().attn_block == 4
    assert ModelConfig().grid == (8, 8) and ModelConfig().num_tokens == 64


@pytest.mark.parametrize("cls", [False, True])
@pytest.mark.parametrize("depth", [1, 3])
def test_parameter_count_closed_form(cls, depth):
    cfg = ModelConfig(depth=depth, use_class_token=cls, embed_dim=32, num_heads=4)
    shapes = parameter_shapes(cfg)
    assert len(shapes) == parameter_tensor_count(cfg) == 7 + int(cls) + 12 * depth
    assert sum(int(np.prod(s)) for s in shapes.values()) == parameter_count(cfg)
    d, r, pd, n = 32, 4, cfg.patch_dim, cfg.num_tokens
    expected = depth * ((4 + 2 * r) * d * d + (8 + r) * d) + pd * d + d + (n + cls) * d + d * int(cls) \
        + 2 * d + d * cfg.num_classes + cfg.num_classes
    assert parameter_count(cfg) == expected


def test_init_scheme_and_zero_head():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(0))
    pos = params["pos_embed"].data
    assert np.abs(pos).max() <= 0.04 + 1e-7 and abs(pos.std() - 0.02) < 0.003
    d = cfg.embed_dim
    qkv = params["blocks.0.attn.qkv.weight"].data
    bound = np.sqrt(6.0 / (2 * d))  # each of q, k, v is a d x d projection
    assert np.abs(qkv).max() <= bound and abs(qkv.std() - bound / np.sqrt(3)) < 0.01
    fc1 = params["blocks.0.mlp.fc1.weight"].data
    assert abs(fc1.std() - np.sqrt(6.0 / (5 * d)) / np.sqrt(3)) < 0.01
    assert not params["head.weight"].data.any() and not params["blocks.0.attn.qv.bias"].data.any()
    assert np.all(params["norm.weight"].data == 1)
    assert pos.dtype == np.float32
    wide = init_params(cfg, np.random.default_rng(0), std=0.5)["blocks.0.attn.qkv.weight"].data
    assert np.abs(wide).max() <= 1.0 and abs(wide.std() - 0.88 * 0.5) < 0.02  # cut at 2 std


# -- patchify ----------------------------------------------------------

def test_patchify_single_patch(rng):
    img = rng.random((1, 4, 4))
    out = patchify(img, 4)
    assert out.shape == (1, 16)
    np.testing.assert_array_equal(out[0], img.reshape(-1))


def test_patchify_constant_and_roundtrip(rng):
    out = patchify(np.full((3, 8, 8), 0.3), 4)
    assert np.all(out == out[0])
    x = rng.random((3, 32, 32))
    tokens = patchify(x, 4)
    assert tokens.shape == (64, 48)
    np.testing.assert_array_equal(unpatchify(tokens, 4, 3, 8, 8), x)


def test_patchify_row_major_grid(rng):
    x = rng.random((2, 12, 8))
    tokens = patchify(x, 4)
    i = 4  # grid cell (2, 0) with cols = 2
    np.testing.assert_array_equal(tokens[i], np.moveaxis(x[:, 8:12, 0:4], 0, -1).reshape(-1))


def test_patchify_rejects_bad_dims():
    with pytest.raises(ad.ShapeError):
        patchify(np.zeros((3, 10, 8)), 4)


# -- input standardisation ---------------------------------------------

def test_standardize_moments_and_constant_channels(rng):
    x = rng.random((2, 3, 8, 8))
    x[1, 2] = 0.4
    z = standardize_images(x)
    np.testing.assert_allclose(z.mean(axis=(-2, -1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[0].var(axis=(-2, -1)), x[0].var(axis=(-2, -1)) / (x[0].var(axis=(-2, -1)) + 1e-4))
    assert np.abs(z[1, 2]).max() < 1e-12


def test_logits_invariant_to_per_channel_affine_input(rng):
    model = tiny_model(seed=2, std=0.3)
    randomize_head(model, rng)
    x = rng.random((3, 1, 8, 8))
    a = model(x).logits.data
    # exact up to the eps in the variance floor, which scales with the gain
    b = model(0.2 + 3.0 * x).logits.data
    np.testing.assert_allclose(a, b, atol=2e-3)
    assert np.abs(model(x + 0.5).logits.data - a).max() < 1e-12


def test_input_norm_none_sees_raw_pixels(rng):
    cfg = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=8, num_heads=2, depth=1,
                      input_norm="none")
    model = VisionTransformer.create(cfg, seed=0, dtype=np.float64, std=0.3)
    randomize_head(model, rng)
    x = rng.random((2, 1, 8, 8))
    assert np.abs(model(x + 0.5).logits.data - model(x).logits.data).max() > 1e-6
    with pytest.raises(ConfigError):
        ModelConfig(input_norm="batch")


# -- forward -----------------------------------------------------------

@pytest.mark.parametrize("cls", [False, True])
def test_zero_head_gives_uniform_prediction(cls):
    cfg = ModelConfig(use_class_token=cls, depth=1, embed_dim=16, num_heads=2)
    model = VisionTransformer.create(cfg, seed=0, dtype=np.float64)
    out = model(np.zeros((1, 3, 32, 32)))
    np.testing.assert_allclose(out.probs, np.full((1, 4), 0.25), atol=1e-12)
    loss = ad.cross_entropy_soft(out.logits, np.eye(4)[[1]]).item()
    assert abs(loss - math.log(4)) < 1e-12


def test_batch_permutation_equivariance(rng):
    model = tiny_model()
    randomize_head(model, rng)
    x = rng.random((3, 1, 8, 8))
    a = model(x).logits.data
    b = model(x[[2, 1, 0]]).logits.data
    np.testing.assert_allclose(b, a[[2, 1, 0]], rtol=1e-12, atol=1e-14)


def test_attention_rows_stochastic_and_records(rng):
    cfg = ModelConfig(depth=2, embed_dim=16, num_heads=2, use_class_token=True)
    model = VisionTransformer.create(cfg, seed=1, dtype=np.float64)
    out = model(rng.random((2, 3, 32, 32)), record_blocks=[1])
    assert sorted(out.attention) == [1, 2]
    for a in out.attention.values():
        assert a.shape == (2, 2, 65, 65)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-5)
    assert sorted(model(rng.random((1, 3, 32, 32))).attention) == [2]


def test_non_finite_activation_names_block():
    model = tiny_model()
    model.params["blocks.0.mlp.fc2.bias"].data[:] = np.inf
    with pytest.raises(NonFiniteActivationError, match="block 1"):
        model(np.zeros((1, 1, 8, 8)))


def test_forward_rejects_wrong_shape():
    with pytest.raises(ad.ShapeError):
        tiny_model()(np.zeros((1, 3, 8, 8)))


def test_classifier_shared_between_uses():
    model = tiny_model()
    t = Tensor(np.ones((1, 8)))
    out = model.classify(t)
    assert out.node.inputs[1] is model.params["head.weight"]


@pytest.mark.parametrize("cls", [False, True])
def test_full_model_gradcheck(rng, cls):
    cfg = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=8, num_heads=2, depth=1,
                      num_classes=3, use_class_token=cls)
    model = VisionTransformer.create(cfg, seed=3, dtype=np.float64, std=0.5)
    randomize_head(model, rng)
    x = rng.random((2, 1, 8, 8))
    y = np.eye(3)[[0, 2]]
    err = gradcheck(lambda: ad.cross_entropy_soft(model(x).logits, y), model.parameters())
    assert err < 1e-4


# -- attention score ---------------------------------------------------

def test_alpha_sums_to_one_without_class_token(rng):
    cfg = ModelConfig(depth=1, embed_dim=16, num_heads=2)
    model = VisionTransformer.create(cfg, seed=0, std=0.3)
    out = model(rng.random((3, 3, 32, 32)).astype(np.float32))
    alphas = image_attention_scores(out.attention[1], cfg)
    assert alphas.shape == (3, 8, 8)
    np.testing.assert_allclose(alphas.sum(axis=(1, 2)), 1.0, atol=1e-5)
    assert np.all(alphas >= 0)


def test_alpha_of_uniform_attention_and_single_token():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, depth=1)
    grid = image_attention_score(np.full((2, 4, 4), 0.25), cfg)
    np.testing.assert_allclose(grid.alpha, np.full((2, 2), 0.25))
    one = ModelConfig(image_size=4, patch_size=4, embed_dim=8, num_heads=2, depth=1)
    np.testing.assert_array_equal(image_attention_score(np.ones((2, 1, 1)), one).alpha, [[1.0]])


def test_alpha_class_token_restriction_without_renormalising(rng):
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, depth=1, use_class_token=True)
    a = rng.random((2, 5, 5))
    a /= a.sum(-1, keepdims=True)
    alpha = image_attention_score(a, cfg).alpha
    expected = a[:, 1:, 1:].mean(axis=0).mean(axis=0).reshape(2, 2)
    np.testing.assert_allclose(alpha, expected)
    assert alpha.sum() < 1.0


def test_alpha_missing_block():
    with pytest.raises(KeyError):
        image_attention_score({1: np.ones((2, 4, 4)) / 4}, TINY, block=2)
