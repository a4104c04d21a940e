from fractions import Fraction

import numpy as np
import pytest

from diffunlearn import denoiser as dn
from diffunlearn import diffusion as df
from diffunlearn.datasets import ToyDatasetSpec, generate_dataset
from diffunlearn.denoiser import NULL_CLASS
from diffunlearn.mathcore import Rng
from conftest import assert_params_equal

CFG = df.CfgConfig(w=0.1, p_uncond=0.1)


# ---- schedule ----

def test_linear_schedule_endpoints_exact():
    s = df.linear_schedule(1000, 1e-4, 0.02)
    assert s.beta(1) == 1e-4 and s.beta(1000) == 0.02


def test_linear_schedule_midpoint_against_rational_interpolation():
    s = df.linear_schedule(1000, 1e-4, 0.02)
    lo, hi = Fraction(1e-4), Fraction(0.02)
    expected = float(lo + (hi - lo) * Fraction(499, 999))
    assert abs(s.beta(500) - expected) <= 1e-17


def test_constant_two_step_schedule():
    b = 0.3
    s = df.linear_schedule(2, b, b)
    np.testing.assert_array_equal(s.betas, [b, b])
    np.testing.assert_array_equal(s.alpha_bars, [1 - b, (1 - b) * (1 - b)])


def test_alpha_bar_recurrence_exact_and_decreasing():
    for s in (df.linear_schedule(1000), df.linear_schedule(200, 5e-4, 0.1)):
        prev = np.concatenate([[1.0], s.alpha_bars[:-1]])
        assert np.array_equal(s.alpha_bars, prev * s.alphas)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bar_at(0) == 1.0


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 0.1, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ValueError):
        df.linear_schedule(*args)


# ---- forward noising and inversion ----

def test_forward_diffuse_limits(small_schedule):
    s = small_schedule
    x0 = Rng(0).normal((4, 2))
    eps = Rng(1).normal((4, 2))
    t = np.array([1, 5, 10, 20])
    ab = s.alpha_bars[t - 1][:, None]
    np.testing.assert_array_equal(df.forward_diffuse(s, x0, t, np.zeros_like(x0)), np.sqrt(ab) * x0)
    np.testing.assert_array_equal(df.forward_diffuse(s, np.zeros_like(eps), t, eps), np.sqrt(1 - ab) * eps)


def test_forward_diffuse_duplicate_formula(small_schedule):
    s = small_schedule
    rng = Rng(2)
    x0, eps, t = rng.normal((50, 3)), rng.normal((50, 3)), rng.integers(1, s.T + 1, 50)
    got = df.forward_diffuse(s, x0, t, eps)
    for i in range(50):
        ab = 1.0
        for k in range(t[i]):
            ab *= 1.0 - s.betas[k]
        np.testing.assert_allclose(got[i], ab**0.5 * x0[i] + (1 - ab) ** 0.5 * eps[i], rtol=1e-13, atol=1e-14)


def test_forward_diffuse_shape_mismatch(small_schedule):
    with pytest.raises(ValueError):
        df.forward_diffuse(small_schedule, np.zeros((2, 2)), 1, np.zeros((2, 3)))


def test_round_trip_and_zero_prediction(small_schedule):
    s = small_schedule
    rng = Rng(3)
    x0, eps, t = rng.normal((100, 2)), rng.normal((100, 2)), rng.integers(1, s.T + 1, 100)
    x_t = df.forward_diffuse(s, x0, t, eps)
    assert np.max(np.abs(df.predict_x0(s, x_t, t, eps) - x0)) <= 1e-12
    ab = s.alpha_bars[t - 1][:, None]
    np.testing.assert_array_equal(df.predict_x0(s, x_t, t, np.zeros_like(x_t)), x_t / np.sqrt(ab))


def test_predict_x0_duplicate_formula(small_schedule):
    s = small_schedule
    rng = Rng(4)
    x_t, e = rng.normal(2), rng.normal(2)
    ab = float(np.prod(1 - s.betas[:7]))
    np.testing.assert_allclose(df.predict_x0(s, x_t, 7, e), (x_t - (1 - ab) ** 0.5 * e) / ab**0.5, rtol=1e-13)


# ---- posterior ----

def test_posterior(small_schedule):
    s = small_schedule
    assert np.all(df.ddpm_posterior(s, np.zeros(2), np.zeros(2), 5).mean == 0)
    v = np.array([0.7, -1.2])
    t = 6
    ab, ab_prev = np.prod(1 - s.betas[:t]), np.prod(1 - s.betas[:t - 1])
    beta = s.betas[t - 1]
    c1 = np.sqrt(ab_prev) * beta / (1 - ab)
    c2 = np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)
    np.testing.assert_allclose(df.ddpm_posterior(s, v, v, t).mean, (c1 + c2) * v, rtol=1e-13)
    with pytest.raises(ValueError):
        df.ddpm_posterior(s, v, v, 1)


def test_posterior_variance_vanishes_for_tiny_first_betas():
    s = df.linear_schedule(10, 1e-12, 1e-12)
    assert df.ddpm_posterior(s, np.zeros(1), np.zeros(1), 2).variance < 1e-11


# ---- guidance ----

def _two_output_model():
    """Linear model whose output is the class embedding: eps_c = (1, 0), eps_null = (0, 1)."""
    W = np.zeros((4, 2))
    W[2:, :] = np.eye(2)
    embed = np.array([[1.0, 0.0], [0.0, 1.0]])  # class 0, then the null row
    return dn.DenoiserParams([W], [np.zeros(2)], embed, num_timesteps=10, time_dim=0)


def test_cfg_hand_case():
    out = df.cfg_predict(_two_output_model(), np.zeros((1, 2)), 3, 0, 0.1)
    np.testing.assert_allclose(out[0], [1.1, -0.1], rtol=0, atol=1e-15)


def test_cfg_zero_weight_and_shared_output(small_params):
    x = Rng(0).normal((3, 2))
    cond = dn.forward(small_params, x, np.full(3, 4), np.zeros(3, int))[0]
    np.testing.assert_array_equal(df.cfg_predict(small_params, x, 4, 0, 0.0), cond)
    p = dn.clone(small_params)
    p.class_embed[-1] = p.class_embed[0]
    for w in (0.0, 0.5, 3.0):
        np.testing.assert_allclose(df.cfg_predict(p, x, 4, 0, w), cond, atol=1e-14)


def test_cfg_affine_in_w(small_params):
    x = Rng(1).normal((3, 2))
    a, b, c = (df.cfg_predict(small_params, x, 2, 1, w) for w in (0.0, 1.0, 2.5))
    np.testing.assert_allclose((c - a), 2.5 * (b - a), atol=1e-13)


def test_cfg_rejects_null_class(small_params):
    with pytest.raises(ValueError, match="guidance needs a class"):
        df.cfg_predict(small_params, np.zeros((1, 2)), 1, NULL_CLASS, 0.1)


# ---- training loss ----

def test_zero_model_loss_is_one_per_dimension(small_schedule, small_params):
    zero = dn.zeros_like(small_params)
    x0 = Rng(0).normal((10_000, 2))
    c = np.zeros(10_000, int)
    loss, _ = df.training_loss_and_grads(zero, x0, c, small_schedule, df.LossWeighting(), CFG, Rng(1))
    assert abs(loss - 1.0) <= 0.05


def test_p_uncond_one_conditions_everything_on_null(monkeypatch, small_schedule, small_params):
    seen = []
    real = dn.forward_pass

    def spy(params, x, t, c):
        seen.append(np.array(c))
        return real(params, x, t, c)

    monkeypatch.setattr(dn, "forward_pass", spy)
    x0, c = Rng(0).normal((64, 2)), np.arange(64) % 3
    df.training_loss_and_grads(small_params, x0, c, small_schedule, df.LossWeighting(),
                               df.CfgConfig(p_uncond=1.0), Rng(2))
    assert seen and all(np.all(v == NULL_CLASS) for v in seen)


def test_p_uncond_zero_never_touches_null_row(small_schedule, small_params):
    x0, c = Rng(0).normal((64, 2)), np.arange(64) % 3
    _, g = df.training_loss_and_grads(small_params, x0, c, small_schedule, df.LossWeighting(),
                                      df.CfgConfig(p_uncond=0.0), Rng(2))
    assert np.all(g.class_embed[-1] == 0.0)
    assert np.any(g.class_embed[0] != 0.0)


def test_duplicated_batch_with_duplicated_draws_gives_same_loss(small_schedule, small_params):
    s = small_schedule
    x0, c = Rng(0).normal((16, 2)), np.arange(16) % 3
    draw = df.draw_noising(Rng(5), c, s.T, 2, 0.1)
    x_t = df.forward_diffuse(s, x0, draw.t, draw.eps)
    l1, _ = dn.backward(small_params, x_t, draw.t, draw.c, draw.eps)
    l2, _ = dn.backward(small_params, np.concatenate([x_t, x_t]), np.concatenate([draw.t, draw.t]),
                        np.concatenate([draw.c, draw.c]), np.concatenate([draw.eps, draw.eps]))
    assert l1 == pytest.approx(l2, rel=1e-14)


def test_training_loss_empty_batch(small_schedule, small_params):
    with pytest.raises(ValueError, match="empty batch"):
        df.training_loss_and_grads(small_params, np.zeros((0, 2)), np.zeros(0, int), small_schedule,
                                   df.LossWeighting(), CFG, Rng(0))


def test_loss_weights_ddim_at_eta_one_equal_ddpm():
    s = df.linear_schedule(200, 5e-4, 0.1)
    a_ddpm = df.LossWeighting("weighted-ddpm").coefficients(s)
    a_ddim = df.LossWeighting("weighted-ddim").coefficients(s)
    np.testing.assert_allclose(a_ddim[1:], a_ddpm[1:], rtol=1e-9)
    assert a_ddpm[0] == a_ddpm[1]
    np.testing.assert_array_equal(df.LossWeighting().coefficients(s), np.ones(200))


def test_ddpm_weight_closed_form():
    s = df.linear_schedule(50, 1e-3, 0.05)
    a = df.LossWeighting("weighted-ddpm").coefficients(s)
    # beta^2 / (2 sigma^2 alpha (1 - abar)) with sigma^2 = (1 - abar_prev) beta / (1 - abar)
    # simplifies to beta / (2 alpha (1 - abar_prev))
    t = np.arange(2, 51)
    expected = s.beta(t) / (2 * s.alpha(t) * (1 - s.alpha_bar_at(t - 1)))
    np.testing.assert_allclose(a[1:], expected, rtol=1e-12)


# ---- samplers ----

def test_ddpm_final_step_is_clean_estimate(small_schedule, small_params):
    x = Rng(0).normal((3, 2))
    out = df.ddpm_sample_step(small_params, x, 1, np.zeros(3, int), small_schedule, CFG, rng=Rng(1))
    eps = df.cfg_predict(small_params, x, 1, 0, CFG.w)
    np.testing.assert_array_equal(out, df.predict_x0(small_schedule, x, 1, eps))


def test_ddpm_zero_model_is_pure_posterior_noise(small_schedule, small_params):
    zero = dn.zeros_like(small_params)
    out = df.ddpm_sample_step(zero, np.zeros((20_000, 2)), 10, np.zeros(20_000, int), small_schedule, CFG,
                              rng=Rng(3))
    var = df.posterior_coefficients(small_schedule, 10)[2]
    assert np.all(np.abs(out.mean(axis=0)) <= 4 * np.sqrt(var / 20_000))
    np.testing.assert_allclose(out.std(axis=0), np.sqrt(var), rtol=0.03)


def test_ddpm_step_deterministic_given_seed(small_schedule, small_params):
    x = np.ones((2, 2))
    a = df.ddpm_sample_step(small_params, x, 5, np.zeros(2, int), small_schedule, CFG, rng=Rng(9))
    b = df.ddpm_sample_step(small_params, x, 5, np.zeros(2, int), small_schedule, CFG, rng=Rng(9))
    np.testing.assert_array_equal(a, b)


def test_ddim_eta_zero_needs_no_randomness(small_schedule, small_params):
    x = np.ones((2, 2))
    a = df.ddim_sample_step(small_params, x, 9, 4, 0.0, np.zeros(2, int), small_schedule, CFG)
    b = df.ddim_sample_step(small_params, x, 9, 4, 0.0, np.zeros(2, int), small_schedule, CFG)
    np.testing.assert_array_equal(a, b)


def test_ddim_eta_one_unit_stride_variance_equals_posterior():
    for s in (df.linear_schedule(1000), df.linear_schedule(200, 5e-4, 0.1)):
        for t in range(2, s.T + 1):
            assert abs(df.ddim_sigma2(s, t, t - 1, 1.0) - df.posterior_coefficients(s, t)[2]) <= 1e-12


def test_ddim_invalid_variance_split(small_schedule, small_params):
    with pytest.raises(ValueError, match="invalid variance split"):
        df.ddim_sample_step(small_params, np.ones((1, 2)), 10, 5, 50.0, np.zeros(1, int), small_schedule, CFG,
                            rng=Rng(0))


def test_ddim_with_oracle_denoiser_recovers_point(monkeypatch, small_schedule, small_params):
    s = small_schedule
    point = np.array([1.5, -0.5])

    def oracle(params, x_t, t, c, cfg):
        ab = s.alpha_bar_at(t)
        return (x_t - np.sqrt(ab) * point) / np.sqrt(1 - ab)

    monkeypatch.setattr(df, "_predict_eps", oracle)
    out = df.sample(small_params, s, df.SamplerConfig("ddim", 0.0, 5), CFG, 4, 0, Rng(0))
    assert np.max(np.abs(out - point)) <= 1e-6


def test_stride_schedule():
    steps = df.stride_schedule(200, 20)
    assert steps[0] == 200 and steps[-1] == 1 and len(steps) == 20
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert df.SamplerConfig("ddpm").timesteps(5) == [5, 4, 3, 2, 1]


def test_sample_determinism_and_chain_isolation(small_schedule, small_params):
    for sampler in (df.SamplerConfig("ddim", 0.5, 6), df.SamplerConfig("ddpm")):
        a = df.sample(small_params, small_schedule, sampler, CFG, 2, 1, Rng(4))
        b = df.sample(small_params, small_schedule, sampler, CFG, 2, 1, Rng(4))
        one = df.sample(small_params, small_schedule, sampler, CFG, 1, 1, Rng(4))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a[:1], one)


# ---- training loop ----

def test_train_zero_epochs_and_trace_length(small_schedule, small_params):
    x, y = Rng(0).normal((30, 2)), np.arange(30) % 3
    res = df.train(small_params, x, y, small_schedule, df.LossWeighting(), CFG, 0, 8,
                   dn.adam_init(small_params), Rng(1))
    assert_params_equal(res.params, small_params)
    assert res.losses == []
    res = df.train(small_params, x, y, small_schedule, df.LossWeighting(), CFG, 3, 8,
                   dn.adam_init(small_params), Rng(1))
    assert len(res.losses) == 3 and res.grad_steps == 12


def test_train_reduces_loss_on_toy_mixture():
    data = generate_dataset(ToyDatasetSpec(n_per_class=200, seed=1))
    s = df.linear_schedule(200, 5e-4, 0.1)
    p = dn.init_params(Rng(1), 2, 4, s.T, hidden=(32, 32))
    res = df.train(p, data.x, data.y, s, df.LossWeighting(), CFG, 300, 128, dn.adam_init(p, 1e-3), Rng(2))
    assert res.losses[-1] < 0.5 * res.losses[0]


def test_train_cosine_decay_is_deterministic(small_schedule, small_params):
    x, y = Rng(0).normal((30, 2)), np.arange(30) % 3
    runs = [df.train(small_params, x, y, small_schedule, df.LossWeighting(), CFG, 4, 8,
                     dn.adam_init(small_params, 1e-2), Rng(1), final_lr=1e-4) for _ in range(2)]
    assert_params_equal(runs[0].params, runs[1].params)
    assert runs[0].adam.lr == pytest.approx(1e-4)
