import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from stylevoc.ar import ArConfig, ArModel, adam, ar_nll, make_batch, predicted_logits
from stylevoc.checks import check_dpo, tiny_ar
from stylevoc.preference import (DEGRADATIONS, DegradationError, DegradationSpec, PreferencePair, dpo_loss,
                                 dpo_step, make_negatives, mean_margin, pair_scores, score)

TERM = 63
scores = st.floats(-1e4, 1e4, allow_nan=False)


def test_equal_scores_give_ln2():
    s = torch.tensor(3.7, dtype=torch.float64)
    assert abs(float(dpo_loss(s, s)) - math.log(2)) <= 1e-9


def test_unit_margin():
    assert float(dpo_loss(torch.tensor(1.0), torch.tensor(0.0))) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-6)


def test_large_margin_and_extreme_scores():
    assert float(dpo_loss(torch.tensor(50.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64))) < 1e-20
    out = dpo_loss(torch.tensor([1e4, -1e4]), torch.tensor([-1e4, 1e4]))
    assert torch.isfinite(out).all() and float(out[1]) == pytest.approx(2e4)


@given(scores, scores)
def test_symmetric_sum_bound(a, b):
    a_t, b_t = torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)
    total = float(dpo_loss(a_t, b_t) + dpo_loss(b_t, a_t))
    if a == b:
        assert total == pytest.approx(2 * math.log(2), abs=1e-12)
    else:
        assert total >= 2 * math.log(2)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-1e3, 1e3))
def test_shift_invariance(a, b, c):
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    assert abs(float(dpo_loss(t(a) + c, t(b) + c) - dpo_loss(t(a), t(b)))) <= 1e-6


@given(st.floats(-30, 30), st.floats(0.01, 10))
def test_strictly_decreasing_in_margin(m, d):
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    assert float(dpo_loss(t(m + d), t(0.0))) < float(dpo_loss(t(m), t(0.0)))


def test_reference_ratio_form():
    loss = dpo_loss(torch.tensor(2.0), torch.tensor(1.0), beta=0.5, ref_pos=torch.tensor(1.0), ref_neg=torch.tensor(1.0))
    assert float(loss) == pytest.approx(math.log1p(math.exp(-0.5)))
    with pytest.raises(ValueError):
        dpo_loss(torch.tensor(0.0), torch.tensor(0.0), beta=1.0)


def test_truncate_golden():
    out = make_negatives([1, 2, 3, 4, 5, 6, 7, TERM], DegradationSpec("truncate", 0.5), np.random.default_rng(0), 64, TERM)
    assert out == [1, 2, 3, 4]


def test_repeat_duplicates_a_span():
    x = [10, 11, 12, 13, TERM]
    out = make_negatives(x, DegradationSpec("repeat", 0.5), np.random.default_rng(3), 64, TERM)
    assert len(out) == 6 and out[-1] == TERM
    # removing one copy of the duplicated token restores the input
    assert any(out[:i] + out[i + 1 :] == x for i in range(1, len(out)) if out[i] == out[i - 1])


def test_early_stop_places_terminator():
    out = make_negatives([1, 2, 3, 4, TERM], DegradationSpec("early_stop", 0.5), np.random.default_rng(0), 64, TERM)
    assert out == [1, 2, TERM]


def test_jitter_keeps_length_and_avoids_terminator():
    x = [1, 2, 3, 4, 5, 6, TERM]
    out = make_negatives(x, DegradationSpec("jitter", 0.5), np.random.default_rng(0), 64, TERM)
    assert len(out) == len(x) and TERM not in out[:-1]
    assert sum(a != b for a, b in zip(out, x)) == 3


def test_too_short_to_degrade():
    with pytest.raises(DegradationError):
        make_negatives([TERM], DegradationSpec("truncate", 0.5), np.random.default_rng(0), 64, TERM)
    with pytest.raises(DegradationError):
        make_negatives([5, TERM], DegradationSpec("early_stop", 0.5), np.random.default_rng(0), 64, TERM)


def test_spec_validation():
    with pytest.raises(ValueError):
        DegradationSpec("shuffle")
    with pytest.raises(ValueError):
        DegradationSpec("repeat", 0.0)


@given(st.lists(st.integers(0, 62), min_size=1, max_size=10), st.sampled_from(DEGRADATIONS),
       st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_negative_always_differs(body, kind, strength, seed):
    x = body + [TERM]
    try:
        out = make_negatives(x, DegradationSpec(kind, strength), np.random.default_rng(seed), 64, TERM)
    except DegradationError:
        return
    assert out != x and len(out) >= 1


def test_pair_invariants():
    with pytest.raises(ValueError):
        PreferencePair([1], np.zeros((2, 3)), [4, 9], [4, 9])
    with pytest.raises(ValueError):
        PreferencePair([1], np.zeros((2, 3)), [], [4, 9])


def _uniform_model():
    model = ArModel(ArConfig(width=8, style_dim=3))
    with torch.no_grad():
        model.ar.head.weight.zero_()
        model.ar.head.bias.zero_()
    return model


def test_uniform_model_score():
    s = score(_uniform_model(), [1, 2, 3, 4, 63], [0, 1], np.zeros((2, 3), dtype=np.float32))
    assert s.item() == pytest.approx(-5 * math.log(64), abs=1e-4)


def test_certain_model_scores_zero():
    model = _uniform_model()
    with torch.no_grad():
        model.ar.head.bias[7] = 1e4
    assert score(model, [7, 7, 7], [0], np.zeros((2, 3), dtype=np.float32)).item() == 0.0


def test_score_matches_nll_times_length():
    model = tiny_ar(3)
    ref = np.random.default_rng(0).standard_normal((3, 3))
    s = score(model, [4, 5, 9], [1, 2], ref)
    batch = make_batch(model.cfg, [[1, 2]], None, ref[None], targets=[[4, 5, 9]], dtype=torch.float64)
    assert s.item() == pytest.approx(-3 * ar_nll(predicted_logits(model, batch), batch.targets).item(), abs=1e-5)


def _pairs():
    rng = np.random.default_rng(1)
    return [PreferencePair([1, 2], rng.standard_normal((3, 3)), [3, 4, 9], [3, 4, 4, 9]),
            PreferencePair([0], rng.standard_normal((3, 3)), [5, 9], [5, 1, 9])]


def test_zero_learning_rate_leaves_parameters():
    model = tiny_ar(4).float()
    before = [p.detach().clone() for p in model.parameters()]
    dpo_step(model, adam(model.parameters(), 1e-2), _pairs(), lr=0.0)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_overfit_one_pair():
    model = tiny_ar(5).float()
    opt = adam(model.parameters(), 1e-2)
    pair = _pairs()[:1]
    for _ in range(60):
        loss = dpo_step(model, opt, pair)
    assert loss < 0.1


def test_steps_raise_margin():
    model = tiny_ar(6).float()
    pairs = _pairs()
    before = mean_margin(model, pairs)
    opt = adam(model.parameters(), 1e-3)
    for _ in range(5):
        dpo_step(model, opt, pairs)
    assert mean_margin(model, pairs) > before


def test_reference_ratio_step_starts_at_ln2():
    model = tiny_ar(7).float()
    ref = tiny_ar(7).float().requires_grad_(False)
    loss = dpo_step(model, adam(model.parameters(), 0.0), _pairs(), beta=0.1, ref_model=ref)
    assert loss == pytest.approx(math.log(2), abs=1e-6)


def test_length_normalised_scores():
    model = tiny_ar(8)
    pairs = _pairs()
    s_pos, s_neg = pair_scores(model, pairs)
    n_pos, n_neg = pair_scores(model, pairs, length_norm=True)
    torch.testing.assert_close(n_pos, s_pos / torch.tensor([3.0, 2.0], dtype=torch.float64))
    torch.testing.assert_close(n_neg, s_neg / torch.tensor([4.0, 3.0], dtype=torch.float64))


def test_score_dpo_grad_check():
    assert check_dpo() < 1e-3
