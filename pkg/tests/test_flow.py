import io

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from stylevoc.ar import adam
from stylevoc.checks import check_flow_loss
from stylevoc.flow import (FlowConfig, FlowDecoder, flow_loss, make_flow_batch, ode_sample, sft_step_flow,
                           time_embedding, write_frames_csv)
from stylevoc.numerics import DimensionError, NumericError, grad_check
from stylevoc.synthetic import SyntheticTask, TaskConfig

SMALL = FlowConfig(vocab=6, feat_dim=2, width=8, layers=2, spk_dim=4, n_speakers=3, time_dim=4)


def _model(seed=0, cfg=SMALL, dtype=torch.float64):
    torch.manual_seed(seed)
    return FlowDecoder(cfg).to(dtype)


def _oracle_field(x0, y1):
    return lambda x, tau, tokens, spk: y1 - x0


def test_speaker_embedding_unit_norm_and_deterministic():
    model = _model()
    a, b = model.speaker_embed([1, 1])
    assert torch.equal(a, b)
    torch.testing.assert_close(model.speaker_embed([0, 1, 2]).norm(dim=-1), torch.ones(3, dtype=torch.float64),
                               atol=1e-6, rtol=0)


def test_unknown_speaker():
    with pytest.raises(KeyError):
        _model().speaker_embed([3])


def test_zero_parameters_give_zero_field():
    model = _model()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    x = torch.randn(2, 3, 2, dtype=torch.float64)
    spk = torch.zeros(2, 4, dtype=torch.float64)
    out = model.field(x, torch.rand(2, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.long), spk)
    assert torch.equal(out, torch.zeros_like(x))


@given(st.integers(1, 4), st.integers(1, 6))
def test_field_shape_matches_state(b, t):
    model = _model()
    x = torch.randn(b, t, 2, dtype=torch.float64)
    out = model.field(x, torch.rand(b, dtype=torch.float64), torch.zeros(b, t, dtype=torch.long),
                      model.speaker_embed([0] * b))
    assert out.shape == x.shape


def test_field_rejects_shape_mismatch():
    model = _model()
    with pytest.raises(DimensionError):
        model.field(torch.zeros(1, 3, 5, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                    torch.zeros(1, 3, dtype=torch.long), None)


def test_time_embedding_range():
    e = time_embedding(torch.linspace(0, 1, 7), 8)
    assert e.shape == (7, 8) and float(e.abs().max()) <= 1.0


def test_field_grad_check_squared_norm():
    model = _model(1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    x = torch.randn(1, 3, 2, dtype=torch.float64)
    tokens = torch.tensor([[0, 4, 2]])
    tau = torch.tensor([0.4], dtype=torch.float64)
    assert grad_check(lambda: model.field(x, tau, tokens, model.speaker_embed([1])).pow(2).sum(),
                      model.named_parameters()) < 1e-3


def test_flow_loss_grad_check():
    assert check_flow_loss() < 1e-3


def test_flow_loss_oracle_field_is_zero():
    g = torch.Generator().manual_seed(0)
    y1 = torch.randn(4, 3, 2, generator=g)
    x0 = torch.randn(4, 3, 2, generator=g)
    assert abs(float(flow_loss(_oracle_field(x0, y1), y1, None, None, x0=x0))) <= 1e-6


def test_zero_field_loss_expectation():
    y1 = torch.tensor([[[0.5, -1.0], [2.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
    n = 100_000
    loss = flow_loss(lambda x, *_: torch.zeros_like(x), y1.expand(n, -1, -1), None, None,
                     generator=torch.Generator().manual_seed(0))
    expected = float(y1.pow(2).sum()) + 3 * 2
    assert float(loss) == pytest.approx(expected, rel=0.02)


def test_flow_loss_fixed_noise_hand_computation():
    y1 = torch.tensor([[[1.0, 2.0]]], dtype=torch.float64)
    x0 = torch.tensor([[[0.5, -0.5]]], dtype=torch.float64)
    tau = torch.tensor([0.25], dtype=torch.float64)
    # field = 2 * state; state = 0.75 * x0 + 0.25 * y1 = (0.625, 0.125)
    loss = flow_loss(lambda x, *_: 2 * x, y1, None, None, x0=x0, tau=tau)
    expected = (1.25 - 0.5) ** 2 + (0.25 - 2.5) ** 2
    assert float(loss) == pytest.approx(expected, abs=1e-5)


def test_flow_loss_ignores_masked_frames():
    y1 = torch.zeros(1, 2, 2, dtype=torch.float64)
    x0 = torch.ones(1, 2, 2, dtype=torch.float64)
    mask = torch.tensor([[True, False]])
    loss = flow_loss(lambda x, *_: torch.zeros_like(x), y1, None, None, mask=mask, x0=x0,
                     tau=torch.zeros(1, dtype=torch.float64))
    assert float(loss) == pytest.approx(2.0)


def test_ode_zero_field_returns_start():
    x0 = torch.randn(2, 3, 2)
    out = ode_sample(lambda x, *_: torch.zeros_like(x), torch.zeros(2, 3, dtype=torch.long), None, 7, 2, x0=x0)
    assert torch.equal(out, x0)


@given(st.integers(1, 64), st.floats(-5, 5))
def test_ode_constant_field_is_exact(steps, c):
    x0 = torch.randn(1, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(steps))
    out = ode_sample(lambda x, *_: torch.full_like(x, c), torch.zeros(1, 2, dtype=torch.long), None, steps, 2, x0=x0)
    torch.testing.assert_close(out, x0 + c, atol=1e-9, rtol=0)


def test_ode_reports_failing_step():
    def blowup(x, tau, *_):
        return torch.where(tau[:, None, None] >= 0.5, torch.full_like(x, float("inf")), torch.zeros_like(x))

    with pytest.raises(NumericError, match="step 2"):
        ode_sample(blowup, torch.zeros(1, 1, dtype=torch.long), None, 4, 2, x0=torch.zeros(1, 1, 2))


def test_ode_needs_a_step():
    with pytest.raises(ValueError):
        ode_sample(lambda x, *_: x, torch.zeros(1, 1, dtype=torch.long), None, 0, 2)


def test_token_change_moves_only_its_frame():
    model = _model(2)
    x = torch.randn(1, 4, 2, dtype=torch.float64)
    tau = torch.tensor([0.3], dtype=torch.float64)
    spk = model.speaker_embed([0])
    a = model.field(x, tau, torch.tensor([[1, 2, 3, 4]]), spk)
    b = model.field(x, tau, torch.tensor([[1, 5, 3, 4]]), spk)
    changed = (a != b).any(dim=-1)[0].tolist()
    assert changed == [False, True, False, False]


def _task_batch(task, n, rng):
    d = task.flow_examples(n, rng)
    return make_flow_batch(d["tokens"], d["frames"], d["speaker"], task.cfg.feat_dim)


def test_zero_learning_rate_leaves_parameters():
    task = SyntheticTask(TaskConfig())
    model = _model(cfg=FlowConfig(width=16, layers=1), dtype=torch.float32)
    before = [p.detach().clone() for p in model.parameters()]
    sft_step_flow(model, adam(model.parameters(), 1e-3), _task_batch(task, 8, np.random.default_rng(0)), lr=0.0)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def _train(seed, steps):
    task = SyntheticTask(TaskConfig())
    rng = np.random.default_rng(seed)
    model = _model(seed, FlowConfig(width=16, layers=1), torch.float32)
    opt = adam(model.parameters(), 3e-3)
    gen = torch.Generator().manual_seed(seed)
    data = task.flow_examples(512, rng)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, 512, 32)
        batch = make_flow_batch([data["tokens"][i] for i in idx], [data["frames"][i] for i in idx],
                                [data["speaker"][i] for i in idx], 2)
        losses.append(sft_step_flow(model, opt, batch, gen))
    return model, losses


def test_loss_window_trends_down():
    _, losses = _train(0, 500)
    assert np.median(losses[250:]) < np.median(losses[:250])


def test_training_is_bit_reproducible():
    a, la = _train(1, 20)
    b, lb = _train(1, 20)
    assert la == lb
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_frames_csv_format(tmp_path):
    frames = np.array([[1 / 3, -2.0], [1e-7, 123456789.123]])
    buf = io.StringIO()
    write_frames_csv(buf, frames)
    assert buf.getvalue() == "0.333333333,-2\n1e-07,123456789\n"
    write_frames_csv(tmp_path / "f.csv", frames)
    assert (tmp_path / "f.csv").read_text() == buf.getvalue()


def test_checkpoint_names():
    names = {n.split(".")[0] for n, _ in FlowDecoder(FlowConfig()).named_parameters()}
    assert names == {"flow", "spk"}
