import numpy as np
import pytest

from vitexplain import tensor_ops as T
from vitexplain.errors import InputError, ModelError
from vitexplain.model import (
    FFN,
    MHSA,
    ModelBundle,
    expected_shapes,
    forward,
    normalize_image,
    residual_error,
    tokenize,
)

import oracles
from conftest import make_bundle, make_config, random_tokens, random_weights


def zero_bundle(config):
    """All-zero weights, zero LN gamma, unit LN beta."""
    weights = {}
    for name, shape in expected_shapes(config).items():
        weights[name] = np.zeros(shape)
        if name.endswith(".b") and ("ln" in name or name.startswith("norm")):
            weights[name] = np.ones(shape)
    return ModelBundle(config=config, weights=weights)


class TestForward:
    def test_zero_weights_uniform_attention_and_bias_logits(self):
        config = make_config(n_blocks=2)
        bundle = zero_bundle(config)
        bundle.weights["head.b"] = np.array([0.5, -1.0, 2.0, 0.0])
        tokens = random_tokens(5, config.d_model, np.random.default_rng(0))
        fr = forward(bundle, tokens)
        assert np.allclose(fr.logits, bundle.weights["head.b"], atol=1e-12)
        for tr in fr.traces:
            if tr.kind == MHSA:
                assert np.allclose(tr.attn, 1.0 / 5, atol=1e-12)

    def test_one_block_mhsa_matches_straightline(self, rng):
        config = make_config(n_blocks=1, n_heads=1, d_model=4, d_ff=5, n_classes=3)
        bundle = make_bundle(config, seed=7)
        e_in = random_tokens(3, 4, rng)
        tr = forward(bundle, e_in).traces[0]
        # independent recompute: E_in + A (LN(E_in) Wv + bv) Wo + bo
        w = bundle.weights
        x = oracles.two_pass_layernorm(e_in, w["block.0.ln1.g"], w["block.0.ln1.b"], 1e-6)
        q = x @ w["block.0.attn.wq"] + w["block.0.attn.bq"]
        k = x @ w["block.0.attn.wk"] + w["block.0.attn.bk"]
        s = q @ k.T / 2.0
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a = a / a.sum(axis=1, keepdims=True)
        tilde = (x @ w["block.0.attn.wv"] + w["block.0.attn.bv"]) @ w["block.0.attn.wo"]
        expected = e_in + a @ (tilde + w["block.0.attn.bo"])
        assert np.max(np.abs(tr.e_out - expected)) < 1e-10

    def test_logits_match_straightline_oracle(self, rng):
        for seed in (0, 1, 2):
            config = make_config(n_blocks=2, n_heads=2, d_model=8)
            bundle = make_bundle(config, seed=seed)
            tokens = random_tokens(5, 8, rng)
            fr = forward(bundle, tokens)
            ref = oracles.straightline_logits(config, bundle.weights, tokens)
            assert np.max(np.abs(fr.logits - ref)) < 1e-10
            assert np.allclose(fr.probs.sum(), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_residual_identities(self, seed):
        config = make_config(n_blocks=2, n_heads=2)
        bundle = make_bundle(config, seed=seed)
        tokens = random_tokens(5, config.d_model, np.random.default_rng(seed + 100))
        for tr in forward(bundle, tokens).traces:
            assert residual_error(tr) < 1e-5

    def test_attention_rows_stochastic(self, rng):
        bundle = make_bundle(make_config(n_blocks=2), seed=3)
        fr = forward(bundle, random_tokens(5, 8, rng))
        for tr in fr.traces:
            if tr.kind == MHSA:
                sums = tr.attn.sum(axis=2)
                assert np.max(np.abs(sums - 1.0)) < 1e-6

    def test_trace_layout(self, rng):
        config = make_config(n_blocks=3)
        bundle = make_bundle(config, seed=5)
        fr = forward(bundle, random_tokens(5, 8, rng))
        assert len(fr.traces) == config.n_sublayers == 6
        assert [tr.kind for tr in fr.traces] == [MHSA, FFN] * 3
        for prev, nxt in zip(fr.traces, fr.traces[1:]):
            assert np.array_equal(prev.e_out, nxt.e_in)

    def test_deterministic(self, rng):
        bundle = make_bundle(make_config(), seed=11)
        tokens = random_tokens(5, 8, rng)
        a = forward(bundle, tokens)
        b = forward(bundle, tokens)
        assert np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.traces[0].attn, b.traces[0].attn)

    def test_zero_blocks(self, rng):
        config = make_config(n_blocks=0)
        bundle = make_bundle(config, seed=1)
        fr = forward(bundle, random_tokens(5, 8, rng))
        assert fr.traces == []
        assert fr.logits.shape == (4,)

    def test_bad_token_width(self, rng):
        bundle = make_bundle(make_config(), seed=1)
        with pytest.raises(ModelError):
            forward(bundle, random_tokens(5, 7, rng))


class TestTokenize:
    def test_zero_image_zero_patch_weights(self):
        config = make_config(image_size=4, patch_size=2, n_blocks=1)
        bundle = make_bundle(config, seed=2)
        bundle.weights["patch_embed.w"] = np.zeros_like(bundle.weights["patch_embed.w"])
        tokens = tokenize(bundle, np.zeros((4, 4, 3)))
        expected_patch = bundle.weights["patch_embed.b"] + bundle.weights["pos_embed"][1:]
        assert np.allclose(tokens[1:], expected_patch, atol=1e-12)
        assert np.allclose(
            tokens[0], bundle.weights["cls_token"] + bundle.weights["pos_embed"][0], atol=1e-12
        )

    def test_one_pixel_patches_identity_like(self, rng):
        config = make_config(image_size=2, patch_size=1, n_blocks=1)
        bundle = make_bundle(config, seed=4)
        image = rng.random((2, 2, 3))
        tokens = tokenize(bundle, image)
        w = bundle.weights
        for j in range(4):
            pixel = image[j // 2, j % 2]
            expected = pixel @ w["patch_embed.w"] + w["patch_embed.b"] + w["pos_embed"][j + 1]
            assert np.allclose(tokens[j + 1], expected, atol=1e-12)

    def test_patch_flatten_order(self, rng):
        # a patch is flattened (pixel row, pixel col, channel) row-major
        config = make_config(image_size=4, patch_size=2, n_blocks=1)
        bundle = make_bundle(config, seed=9)
        image = rng.random((4, 4, 3))
        tokens = tokenize(bundle, image)
        patch01 = image[0:2, 2:4, :].reshape(-1)  # grid position (0, 1) -> token 2
        expected = (
            patch01 @ bundle.weights["patch_embed.w"]
            + bundle.weights["patch_embed.b"]
            + bundle.weights["pos_embed"][2]
        )
        assert np.allclose(tokens[2], expected, atol=1e-12)

    def test_wrong_size_raises(self):
        bundle = make_bundle(make_config(image_size=4, patch_size=2), seed=2)
        with pytest.raises(InputError):
            tokenize(bundle, np.zeros((6, 6, 3)))

    def test_token_count(self):
        config = make_config(image_size=6, patch_size=2, n_blocks=1)
        bundle = make_bundle(config, seed=2)
        tokens = tokenize(bundle, np.zeros((6, 6, 3)))
        assert tokens.shape == (1 + 9, config.d_model)


def test_normalize_image():
    img = np.ones((2, 2, 3)) * 0.5
    out = normalize_image(img, np.array([0.5, 0.25, 0.0]), np.array([0.5, 0.5, 1.0]))
    assert np.allclose(out[0, 0], [0.0, 0.5, 0.5])


def test_bundle_validation_reports_problems():
    config = make_config(n_blocks=1)
    weights = random_weights(config, np.random.default_rng(0))
    del weights["block.0.attn.wq"]
    weights["head.w"] = np.zeros((3, 3))
    weights["extra"] = np.zeros(2)
    bundle = ModelBundle(config=config, weights=weights)
    with pytest.raises(ModelError) as err:
        bundle.validate()
    msg = str(err.value)
    assert "block.0.attn.wq" in msg and "head.w" in msg and "extra" in msg


def test_config_invariants():
    with pytest.raises(ModelError):
        make_config(image_size=5, patch_size=2)
    with pytest.raises(ModelError):
        make_config(d_model=9, n_heads=2)
