import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from stylevoc.numerics import DimensionError, grad_check, layer_norm
from stylevoc.style import (FiLMGenerator, StyleCrossAttention, StyleEncoder, StyleReference, encode_style,
                            film_ln)


def _f64(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_encoder_zero_frames_zero_weights():
    enc = StyleEncoder(3, 4)
    with torch.no_grad():
        enc.weight.zero_()
    out = encode_style(StyleReference(np.zeros((5, 3), dtype=np.float32)), enc)
    assert torch.equal(out, torch.zeros(5, 4))


def test_encoder_single_frame_shape():
    out = encode_style(StyleReference(np.ones((1, 3), dtype=np.float32)), StyleEncoder(3, 6))
    assert out.shape == (1, 6)


def test_encoder_width_mismatch():
    with pytest.raises(DimensionError):
        StyleEncoder(3, 4)(torch.ones(2, 5))


def test_reference_needs_a_frame():
    with pytest.raises(DimensionError):
        StyleReference(np.zeros((0, 3)))


def test_film_untrained_is_zero():
    gen = FiLMGenerator(8, 2)
    for gamma, beta in gen(torch.randn(2, 5, 8)):
        assert torch.equal(gamma, torch.zeros(2, 8)) and torch.equal(beta, torch.zeros(2, 8))


def test_film_bias_only():
    gen = FiLMGenerator(8, 2)
    with torch.no_grad():
        gen.layers["L1"]["gamma"].bias.fill_(0.7)
    for seed in range(3):
        gamma, _ = gen.layer_params(torch.randn(4, 8, generator=torch.Generator().manual_seed(seed)), 1)
        assert torch.allclose(gamma, torch.full((8,), 0.7))


def test_film_matches_pool_affine_oracle():
    torch.manual_seed(3)
    gen = FiLMGenerator(8, 2).double()
    for p in gen.parameters():
        torch.nn.init.normal_(p)
    es = _f64(5, 8, seed=1)
    pooled = es.mean(0) @ gen.proj.weight.T + gen.proj.bias
    lin = gen.layers["L0"]
    gamma, beta = gen.layer_params(es, 0)
    torch.testing.assert_close(gamma, pooled @ lin["gamma"].weight.T + lin["gamma"].bias, atol=1e-6, rtol=0)
    torch.testing.assert_close(beta, pooled @ lin["beta"].weight.T + lin["beta"].bias, atol=1e-6, rtol=0)


def test_film_layer_out_of_range():
    with pytest.raises(IndexError):
        FiLMGenerator(4, 2).layer_params(torch.zeros(1, 4), 2)


@given(st.integers(0, 2**31 - 1))
def test_film_ln_zero_modulation_is_layer_norm(seed):
    h = torch.randn(3, 8, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(film_ln(h, torch.zeros(8), torch.zeros(8)), layer_norm(h))


def test_film_ln_scale_annihilation():
    beta = torch.arange(8.0)
    assert torch.equal(film_ln(torch.randn(8), -torch.ones(8), beta), beta)


def test_film_ln_matches_float64_oracle():
    h, g, b = (np.random.default_rng(s).standard_normal(8) for s in range(3))
    mean = h.mean()
    ln = (h - mean) / math.sqrt(((h - mean) ** 2).mean() + 1e-5)
    got = film_ln(*(torch.tensor(v, dtype=torch.float32) for v in (h, g, b)))
    np.testing.assert_allclose(got.numpy(), (1 + g) * ln + b, atol=1e-5)


def test_film_ln_width_mismatch():
    with pytest.raises(DimensionError):
        film_ln(torch.zeros(8), torch.zeros(4), torch.zeros(8))


def _xattn(d=4, seed=0):
    torch.manual_seed(seed)
    return StyleCrossAttention(d).double()


def test_xattn_single_key_routes_value():
    xa = _xattn()
    h = _f64(1, 4, seed=2)
    for seed in range(3):
        out = xa(_f64(1, 4, seed=10 + seed), h)
        torch.testing.assert_close(out, h @ xa.wv @ xa.wo)


def test_xattn_zero_output_projection():
    xa = _xattn()
    with torch.no_grad():
        xa.wo.zero_()
    assert torch.equal(xa(_f64(3, 4), _f64(5, 4, seed=1)), torch.zeros(5, 4, dtype=torch.float64))


def test_xattn_matches_double_loop_oracle():
    xa = _xattn()
    es, h = _f64(2, 4, seed=1), _f64(3, 4, seed=2)
    q, k, v = (t.detach() for t in (es @ xa.wq, h @ xa.wk, h @ xa.wv))
    a = torch.zeros(2, 3, dtype=torch.float64)
    for m in range(2):
        logits = [float(q[m] @ k[i]) / 2.0 for i in range(3)]
        z = sum(math.exp(x) for x in logits)
        for i in range(3):
            a[m, i] = math.exp(logits[i]) / z
    u = [sum(a[m, i] * v[i] for i in range(3)) for m in range(2)]
    expected = torch.stack([sum(a[m, i] * (u[m] @ xa.wo) for m in range(2)) for i in range(3)])
    torch.testing.assert_close(xa(es, h), expected, atol=1e-5, rtol=0)


def test_xattn_causal_last_position_matches_full():
    xa = _xattn()
    es, h = _f64(3, 4, seed=1), _f64(5, 4, seed=2)
    full = xa(es, h)
    causal = xa(es, h, causal=True)
    torch.testing.assert_close(causal[-1], full[-1])
    # position i sees exactly the update it would get from the prefix h[:i+1]
    for i in range(5):
        torch.testing.assert_close(causal[i], xa(es, h[: i + 1])[i])


def test_xattn_width_mismatch():
    with pytest.raises(DimensionError):
        StyleCrossAttention(4)(torch.zeros(2, 3), torch.zeros(5, 4))


def test_xattn_rows_sum_to_one():
    a = _xattn().attention(_f64(3, 4), _f64(6, 4, seed=1))
    torch.testing.assert_close(a.sum(-1), torch.ones_like(a.sum(-1)), atol=1e-6, rtol=0)


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_xattn_invariant_to_logit_shift(seed, c):
    xa = _xattn()
    es, h = _f64(1, 4, seed=seed), _f64(4, 4, seed=seed + 1)
    q = (es @ xa.wq)[0]
    # a common key offset along q adds exactly c to every logit
    offset = c * 2.0 * q / (q @ q)
    scores = (es @ xa.wq) @ (h @ xa.wk + offset).T / 2.0
    a = torch.softmax(scores, -1)
    delta = a.T @ (a @ (h @ xa.wv)) @ xa.wo
    torch.testing.assert_close(delta, xa(es, h), atol=1e-9, rtol=1e-9)


@given(st.permutations(list(range(5))))
def test_permuting_style_frames_leaves_updates_unchanged(perm):
    xa = _xattn()
    gen = FiLMGenerator(4, 1).double()
    for p in gen.parameters():
        torch.nn.init.normal_(p, generator=torch.Generator().manual_seed(0))
    es, h = _f64(5, 4, seed=1), _f64(3, 4, seed=2)
    p_es = es[list(perm)]
    torch.testing.assert_close(xa(p_es, h), xa(es, h), atol=1e-12, rtol=0)
    torch.testing.assert_close(gen.layer_params(p_es, 0)[0], gen.layer_params(es, 0)[0], atol=1e-12, rtol=0)
    a, pa = xa.attention(es, h), xa.attention(p_es, h)
    torch.testing.assert_close(pa, a[..., list(perm), :])


def test_film_ln_and_xattn_grad_check():
    xa = _xattn()
    h = _f64(4, 4, seed=1).requires_grad_()
    es = _f64(3, 4, seed=2).requires_grad_()
    gamma = (0.1 * _f64(4, seed=3)).requires_grad_()
    beta = (0.1 * _f64(4, seed=4)).requires_grad_()

    def loss():
        x = film_ln(h, gamma, beta)
        return (x + xa(es, x, causal=True)).pow(2).sum()

    params = [("h", h), ("es", es), ("gamma", gamma), ("beta", beta), *xa.named_parameters()]
    assert grad_check(loss, params) < 1e-3
