from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_ARCH, perturb_weights, random_stats
from courtplan import container
from courtplan.core import RejectedInput, TrajectoryTensor
from courtplan.diffusion import (
    FULL_SCALE_BATCH,
    FULL_SCALE_LR,
    FULL_SCALE_N_STEPS,
    FULL_SCALE_TRAIN_STEPS,
    Denoiser,
    NoiseSchedule,
    NumericAbort,
    TrainConfig,
    evaluate_noise_loss,
    make_schedule,
    noise_loss,
    posterior_mean,
    predict_noise,
    q_sample,
    train_diffusion,
)
from courtplan.networks import ArchSpec, TemporalUnet, ValueNet, count_parameters


def test_full_scale_training_constants():
    assert (FULL_SCALE_N_STEPS, FULL_SCALE_LR, FULL_SCALE_BATCH, FULL_SCALE_TRAIN_STEPS) == (20, 2e-5, 512, 245_000)


# --- schedule -------------------------------------------------------------------

def test_single_step_schedule():
    s = make_schedule(1)
    assert s.alpha_bar.shape == (1,) and s.alpha_bar[0] <= 0.05


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_invariants(kind):
    s = make_schedule(20, kind)
    assert len(s.alpha_bar) == 20
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha > 0) & (s.alpha <= 1))
    assert s.alpha_bar[0] >= 0.99 and s.alpha_bar[-1] <= 0.05
    assert np.all(s.posterior_var >= 0)


def test_cosine_matches_closed_form():
    n, off = 20, 0.008

    def f(t):
        return math.cos((t / n + off) / (1 + off) * math.pi / 2) ** 2

    expected = [f(k) / f(0) for k in range(1, n + 1)]
    s = make_schedule(n)
    # the final step's beta is clipped to 0.999
    np.testing.assert_allclose(s.alpha_bar[:-1], expected[:-1], rtol=1e-12)
    assert s.alpha_bar[-1] == pytest.approx(max(expected[-1], s.alpha_bar[-2] * 0.001), rel=1e-12)


def test_posterior_var_matches_bayes():
    s = make_schedule(20)
    for i in range(1, 20):
        prev = s.alpha_bar[i - 1]
        expected = (1 - s.alpha[i]) * (1 - prev) / (1 - s.alpha_bar[i])
        assert s.posterior_var[i] == pytest.approx(expected, rel=1e-12)
    assert s.posterior_var[0] == s.posterior_var[1]


def test_make_schedule_rejects():
    with pytest.raises(RejectedInput):
        make_schedule(0)
    with pytest.raises(RejectedInput):
        make_schedule(5, "sigmoid")


# --- q_sample / posterior mean ---------------------------------------------------

def test_q_sample_zero_noise_and_identity():
    s = make_schedule(10)
    tau0 = np.random.default_rng(0).normal(size=(4, 66))
    np.testing.assert_array_equal(q_sample(s, tau0, 3, np.zeros_like(tau0)), math.sqrt(s.alpha_bar[3]) * tau0)
    ident = NoiseSchedule("custom", np.ones(3))
    np.testing.assert_array_equal(q_sample(ident, tau0, 2, np.ones_like(tau0)), tau0)
    with pytest.raises(RejectedInput):
        q_sample(s, tau0, 10, np.zeros_like(tau0))
    with pytest.raises(RejectedInput):
        q_sample(s, tau0, 0, np.zeros((3, 66)))


@pytest.mark.parametrize("i", [0, 9, 19])
def test_q_sample_monte_carlo(i):
    s = make_schedule(20)
    rng = np.random.default_rng(i)
    tau0 = rng.uniform(-1, 1, size=(2, 66))
    draws = np.stack([q_sample(s, tau0, i, rng.standard_normal(tau0.shape)) for _ in range(10_000)])
    mean_target = math.sqrt(s.alpha_bar[i]) * tau0
    sd = math.sqrt(1 - s.alpha_bar[i])
    assert np.all(np.abs(draws.mean(axis=0) - mean_target) <= 4 * sd / 100)
    var = (draws - mean_target).var(axis=0)
    assert np.all(np.abs(var / (1 - s.alpha_bar[i]) - 1) <= 0.05)


def test_posterior_mean_reductions():
    s = make_schedule(10)
    x = np.random.default_rng(1).normal(size=(3, 66))
    np.testing.assert_allclose(posterior_mean(s, x, np.zeros_like(x), 4), x / math.sqrt(s.alpha[4]), rtol=1e-15)
    ident = NoiseSchedule("custom", np.ones(2))
    np.testing.assert_array_equal(posterior_mean(ident, x, x, 1), x)
    with pytest.raises(RejectedInput):
        posterior_mean(s, x, x, -1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 19), st.integers(0, 10_000))
def test_posterior_mean_matches_bayes_form(i, seed):
    """The noise form equals the Gaussian posterior mean written through the implied clean sample."""
    s = make_schedule(20)
    rng = np.random.default_rng(seed)
    tau, eps = rng.normal(size=(2, 8, 66))
    a, ab, ab_prev = s.alpha[i], s.alpha_bar[i], s.alpha_bar[i - 1]
    x0 = (tau - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    bayes = (math.sqrt(ab_prev) * (1 - a) / (1 - ab)) * x0 + (math.sqrt(a) * (1 - ab_prev) / (1 - ab)) * tau
    np.testing.assert_allclose(posterior_mean(s, tau, eps, i), bayes, rtol=1e-12, atol=1e-12)


def test_posterior_mean_torch_and_numpy_agree():
    s = make_schedule(20)
    x, e = np.random.default_rng(2).normal(size=(2, 4, 66))
    out = posterior_mean(s, torch.from_numpy(x), torch.from_numpy(e), 7)
    np.testing.assert_array_equal(out.numpy(), posterior_mean(s, x, e, 7))


def test_noise_loss_minimum():
    e = torch.randn(4, 8, 66)
    assert float(noise_loss(e, e)) == 0.0
    assert float(noise_loss(e + 0.1, e)) > 0.0


# --- networks ------------------------------------------------------------------

@pytest.mark.parametrize("H", [64, 128, 30])
def test_unet_shape_contract(H):
    arch = ArchSpec(horizon=H, base_width=8)
    net = TemporalUnet(arch)
    x = torch.randn(2, H, 66)
    out = net(x, torch.tensor([0, 3]))
    assert out.shape == x.shape
    assert not out.any()  # zero-initialized final layer
    assert arch.padded_horizon % arch.downsample_factor == 0


def test_unet_rejects_wrong_shape():
    net = TemporalUnet(ArchSpec(horizon=16, base_width=8))
    with pytest.raises(RejectedInput):
        net(torch.randn(1, 17, 66), torch.tensor([0]))


def test_desk_scale_parameter_counts():
    arch = ArchSpec(horizon=64)
    assert 0.5e6 < count_parameters(TemporalUnet(arch)) < 2e6
    assert count_parameters(ValueNet(arch)) < count_parameters(TemporalUnet(arch))


def test_unet_differentiable_in_input():
    net = TemporalUnet(ArchSpec(horizon=16, base_width=8), zero_init_final=False)
    x = torch.randn(1, 16, 66, requires_grad=True)
    net(x, torch.tensor([1])).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0


# --- denoiser ------------------------------------------------------------------

def test_predict_noise_zero_init_and_determinism():
    den = Denoiser(SMALL_ARCH, make_schedule(5), random_stats())
    tau = TrajectoryTensor(np.random.default_rng(0).uniform(-1, 1, (16, 66)), 16, normalized=True)
    assert not predict_noise(den, tau, 2).any()
    perturb_weights(den.model, 3)
    np.testing.assert_array_equal(predict_noise(den, tau, 2), predict_noise(den, tau, 2))
    with pytest.raises(RejectedInput):
        predict_noise(den, TrajectoryTensor(tau.values, 16), 2)


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    den = Denoiser(SMALL_ARCH, make_schedule(5), random_stats(), seed=4)
    perturb_weights(den.model, 5)
    fp1 = den.save(tmp_path / "a.ckpt")
    back = Denoiser.load(tmp_path / "a.ckpt")
    fp2 = back.save(tmp_path / "b.ckpt")
    assert fp1 == fp2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert container.fingerprint_file(tmp_path / "a.ckpt") == fp1


def test_training_is_seed_deterministic(synthetic_dataset):
    data = synthetic_dataset.values[:8]
    cfg = TrainConfig(lr=1e-3, batch_size=4, steps=3, seed=9, log_every=0)
    losses = []
    for _ in range(2):
        den = Denoiser(SMALL_ARCH, make_schedule(5), synthetic_dataset.stats, seed=1)
        losses.append(train_diffusion(den, data, cfg).losses)
    assert losses[0] == losses[1]


def test_overfit_fixed_triples():
    """Eight fixed (trajectory, noise, step) triples can be memorized."""
    torch.manual_seed(0)
    s = make_schedule(5)
    arch = ArchSpec(horizon=8, base_width=64, dim_mults=(1, 2))
    den = Denoiser(arch, s, random_stats(), seed=0)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.rand(8, 8, 66, generator=gen) * 2 - 1
    eps = torch.randn(8, 8, 66, generator=gen)
    t = torch.arange(8) % 5
    ab = torch.tensor(s.alpha_bar)[t][:, None, None].float()
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    steps = 1200
    opt = torch.optim.Adam(den.model.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    den.model.train()
    for _ in range(steps):
        opt.zero_grad()
        noise_loss(den.model(xt, t), eps).backward()
        opt.step()
        sched.step()
    den.model.eval()
    with torch.no_grad():
        rms = float((den.model(xt, t) - eps).pow(2).mean().sqrt())
    assert rms <= 1e-2


def test_nan_loss_aborts_with_last_good_weights(synthetic_dataset):
    den = Denoiser(SMALL_ARCH, make_schedule(5), synthetic_dataset.stats, seed=1)
    data = synthetic_dataset.values[:4].copy()
    cfg = TrainConfig(lr=1e-3, batch_size=2, steps=50, seed=0, log_every=0)
    calls = {"n": 0}
    forward = den.model.forward

    def flaky(x, t):
        calls["n"] += 1
        out = forward(x, t)
        return out * float("nan") if calls["n"] == 5 else out

    den.model.forward = flaky
    with pytest.raises(NumericAbort) as exc:
        train_diffusion(den, data, cfg)
    assert exc.value.step == 4
    assert all(np.isfinite(v).all() for v in exc.value.state.values())


def test_evaluate_noise_loss_zero_model_is_one():
    den = Denoiser(SMALL_ARCH, make_schedule(5), random_stats())
    data = np.random.default_rng(0).uniform(-1, 1, (8, 16, 66))
    assert evaluate_noise_loss(den, data, n_draws=64) == pytest.approx(1.0, abs=0.02)
