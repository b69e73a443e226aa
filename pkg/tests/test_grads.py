import numpy as np
import pytest

from vitexplain.errors import InputError
from vitexplain.grads import attention_gradients
from vitexplain.model import MHSA, forward

import oracles
from conftest import make_bundle, make_config, random_tokens


def max_rel_error(analytic, fd):
    """Max abs deviation relative to the finite-difference gradient scale."""
    scale = max(float(np.max(np.abs(fd))), 1e-12)
    return float(np.max(np.abs(analytic - fd))) / scale


def check_against_fd(config, bundle, tokens, class_c, tol=1e-4):
    fr = forward(bundle, tokens)
    gset = attention_gradients(bundle, fr.traces, class_c)
    mhsa_traces = [tr for tr in fr.traces if tr.kind == MHSA]
    assert len(gset.grads) == len(mhsa_traces)
    worst = 0.0
    n = tokens.shape[0]
    for layer, (tr, g) in enumerate(zip(mhsa_traces, gset.grads)):
        assert g.shape == tr.attn.shape
        assert np.all(np.isfinite(g))
        for h in range(config.n_heads):
            fd = oracles.fd_attention_gradient(
                config, bundle.weights, tokens, class_c, layer, h, n
            )
            worst = max(worst, max_rel_error(g[h], fd))
    assert worst < tol, f"finite-difference mismatch: {worst:.3e}"
    return worst


def test_zero_blocks_empty_grad_set(rng):
    config = make_config(n_blocks=0)
    bundle = make_bundle(config, seed=1)
    tokens = random_tokens(4, config.d_model, rng)
    fr = forward(bundle, tokens)
    gset = attention_gradients(bundle, fr.traces, 2, tokens_in=tokens)
    assert gset.grads == []
    assert gset.target_class == 2
    assert np.isclose(gset.target_prob, fr.probs[2])


def test_toy_one_block_matches_fd(rng):
    config = make_config(n_blocks=1, n_heads=2, d_model=8, d_ff=6, n_classes=3)
    bundle = make_bundle(config, seed=42)
    tokens = random_tokens(4, 8, rng)
    check_against_fd(config, bundle, tokens, class_c=1)


def test_two_blocks_matches_fd(rng):
    config = make_config(n_blocks=2, n_heads=2, d_model=8, d_ff=7, n_classes=4)
    bundle = make_bundle(config, seed=43)
    tokens = random_tokens(5, 8, rng)
    check_against_fd(config, bundle, tokens, class_c=0)


def test_scaled_head_still_matches_fd(rng):
    # doubling the classifier head scales logit gradients linearly but the
    # probability gradient follows the softmax chain rule; FD stays the oracle
    config = make_config(n_blocks=1, n_heads=1, d_model=6, d_ff=5, n_classes=3)
    bundle = make_bundle(config, seed=44)
    tokens = random_tokens(4, 6, rng)
    fr = forward(bundle, tokens)
    base = attention_gradients(bundle, fr.traces, 1).grads[0]

    bundle.weights["head.w"] = bundle.weights["head.w"] * 2.0
    bundle.weights["head.b"] = bundle.weights["head.b"] * 2.0
    check_against_fd(config, bundle, tokens, class_c=1)
    scaled = attention_gradients(bundle, forward(bundle, tokens).traces, 1).grads[0]
    assert not np.allclose(scaled, 2.0 * base)  # softmax chain rule, not linear


def test_target_prob_matches_forward(rng):
    config = make_config(n_blocks=2)
    bundle = make_bundle(config, seed=45)
    tokens = random_tokens(5, 8, rng)
    fr = forward(bundle, tokens)
    gset = attention_gradients(bundle, fr.traces, 3)
    assert np.isclose(gset.target_prob, fr.probs[3], atol=1e-12)


def test_class_out_of_range(rng):
    config = make_config(n_blocks=1)
    bundle = make_bundle(config, seed=46)
    fr = forward(bundle, random_tokens(4, 8, rng))
    with pytest.raises(InputError):
        attention_gradients(bundle, fr.traces, 99)


def test_fills_trace_grad_attn(rng):
    config = make_config(n_blocks=1)
    bundle = make_bundle(config, seed=47)
    fr = forward(bundle, random_tokens(4, 8, rng))
    gset = attention_gradients(bundle, fr.traces, 0)
    assert np.array_equal(fr.traces[0].grad_attn, gset.grads[0])
