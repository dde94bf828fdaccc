import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnpoison import diffusion as df, gradcore as gc
from cnpoison.gradcore import Tensor

# product of (1 - beta) for 250 linear betas 1e-4 .. 0.04
ALPHA_BAR_T = 0.0062146732664848


def test_single_step_schedule():
    s = df.make_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9])


def test_two_step_schedule():
    s = df.make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=1e-15)


def test_default_terminal_alpha_bar_pinned():
    s = df.make_schedule()
    assert s.T == 250
    assert s.alpha_bar[-1] == pytest.approx(ALPHA_BAR_T, rel=1e-12)
    assert s.alpha_bar[-1] < 0.05


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule_rejected(args):
    with pytest.raises(ValueError):
        df.make_schedule(*args)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_schedule_invariants(T, b0, extra):
    b1 = min(b0 + extra, 0.9)
    s = df.make_schedule(T, b0, b1)
    assert len(s.beta) == len(s.alpha) == len(s.alpha_bar) == T
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    assert s.alpha_bar[0] == 1 - s.beta[0]
    np.testing.assert_array_equal(s.alpha_bar, df.make_schedule(T, b0, b1).alpha_bar)


def test_alpha_bar_at_zero_is_one():
    assert df.make_schedule().alpha_bar_at(0) == 1.0


# --------------------------------------------------------------- q_sample
def test_q_sample_quarter_alpha_bar():
    s = df.schedule_from_betas([0.75])
    np.testing.assert_allclose(df.q_sample(np.ones((2, 2)), 1, np.zeros((2, 2)), s), 0.5)


def test_q_sample_identity_endpoint():
    # alpha_bar -> 1 as beta -> 0
    s = df.schedule_from_betas([1e-300])
    x0 = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_allclose(df.q_sample(x0, 1, np.ones((3, 3)), s), x0, atol=1e-149)


def test_q_sample_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        df.q_sample(np.zeros((2, 2)), 1, np.zeros((2, 3)), df.make_schedule())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 250), st.integers(0, 2**31 - 1))
def test_q_sample_is_exact_closed_form(t, seed):
    rng = np.random.default_rng(seed)
    s = df.make_schedule()
    x0, eps = rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    ab = s.alpha_bar[t - 1]
    np.testing.assert_array_equal(df.q_sample(x0, np.array([t, t]), eps, s), np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)


@pytest.mark.parametrize("frac", [0.25, 0.5, 1.0])
def test_q_sample_monte_carlo_statistics(frac):
    s = df.make_schedule()
    t = int(s.T * frac)
    ab = s.alpha_bar[t - 1]
    rng = np.random.default_rng(t)
    x0 = rng.uniform(-1, 1, (4, 4))
    n = 10_000
    z = df.q_sample(np.broadcast_to(x0, (n, 4, 4)), np.full(n, t), rng.standard_normal((n, 4, 4)), s)
    assert np.all(np.abs(z.mean(0) - np.sqrt(ab) * x0) < 3 * np.sqrt((1 - ab) / n))
    assert np.all(np.abs(z.var(0) / (1 - ab) - 1) < 0.02 + 3 * np.sqrt(2 / n))


# ---------------------------------------------------------------- loss
def test_perfect_predictor_has_zero_loss():
    s = df.make_schedule()
    x0 = np.zeros((4, 1, 4, 4))

    def oracle(z, t, label, cond):
        # x0 = 0 so z_t = sqrt(1 - ab) * eps
        return Tensor(z / np.sqrt(1 - s.alpha_bar_at(t))[:, None, None, None])

    with gc.precision(np.float64):
        assert df.ldm_loss(oracle, x0, None, np.zeros(4), np.random.default_rng(0), s).item() == pytest.approx(0, abs=1e-20)


def test_zero_predictor_loss_is_noise_power():
    loss = df.ldm_loss(lambda z, t, l, c: Tensor(np.zeros_like(z)), np.zeros((64, 1, 16, 16)), None,
                       np.zeros(64), np.random.default_rng(1), df.make_schedule())
    assert loss.item() == pytest.approx(1.0, abs=0.02)


def test_loss_is_deterministic_for_fixed_seed():
    def stub(z, t, l, c):
        return Tensor(np.tanh(z) * 0.3)

    x0 = np.random.default_rng(2).uniform(-1, 1, (8, 1, 8, 8))
    a = df.ldm_loss(stub, x0, None, np.zeros(8), np.random.default_rng(5), df.make_schedule()).item()
    b = df.ldm_loss(stub, x0, None, np.zeros(8), np.random.default_rng(5), df.make_schedule()).item()
    assert a == b


# ---------------------------------------------------------------- samplers
def point_mass_oracle(x_star, s):
    """Optimal noise predictor when the data distribution is a single image."""
    def predict(z, t, label, cond):
        ab = s.alpha_bar_at(t)[:, None, None, None]
        return Tensor((z - np.sqrt(ab) * x_star) / np.sqrt(1 - ab), dtype=np.float64)
    return predict


@pytest.mark.parametrize("kind,steps", [("ddim", 10), ("ddim", 50), ("ancestral", 250)])
def test_samplers_recover_point_mass(kind, steps):
    s = df.make_schedule()
    x_star = np.random.default_rng(0).uniform(-0.9, 0.9, (1, 1, 8, 8))
    out = df.sample(point_mass_oracle(x_star, s), np.zeros((2, 1, 8, 8)), np.zeros(2),
                    df.SamplerConfig(kind=kind, steps=steps), s)
    np.testing.assert_allclose(out, df.to_image_space(np.broadcast_to(x_star, (2, 1, 8, 8))), atol=1e-6)


def test_ancestral_step_matches_posterior_mean_and_variance():
    s = df.make_schedule()
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-0.9, 0.9, (4, 4))
    eps = rng.standard_normal((4, 4))
    t = 120
    xt = df.q_sample(x0, t, eps, s)
    ab, ab_prev, beta, alpha = s.alpha_bar[t - 1], s.alpha_bar[t - 2], s.beta[t - 1], s.alpha[t - 1]
    mean = np.sqrt(ab_prev) * beta / (1 - ab) * x0 + np.sqrt(alpha) * (1 - ab_prev) / (1 - ab) * xt
    var = (1 - ab_prev) / (1 - ab) * beta
    got_mean = df.generalized_step(xt, eps, t, t - 1, s, 1.0, None)
    np.testing.assert_allclose(got_mean, mean, rtol=1e-10, atol=1e-12)
    noise = np.ones((4, 4))
    got = df.generalized_step(xt, eps, t, t - 1, s, 1.0, noise)
    np.testing.assert_allclose(got - got_mean, np.sqrt(var), rtol=1e-10)


def _stub(z, t, label, cond):
    return Tensor(0.5 * z + 0.1 * cond)


def test_ddim_is_deterministic():
    cfg = df.SamplerConfig(steps=20, seed=4)
    c = np.random.default_rng(0).random((3, 1, 8, 8))
    a = df.sample(_stub, c, np.zeros(3), cfg, df.make_schedule())
    b = df.sample(_stub, c, np.zeros(3), cfg, df.make_schedule())
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_full_ddim_equals_ancestral_without_noise():
    s = df.make_schedule(T=40)
    c = np.random.default_rng(1).random((2, 1, 8, 8))
    a = df.sample(_stub, c, np.zeros(2), df.SamplerConfig(kind="ddim", steps=40), s)
    b = df.sample(_stub, c, np.zeros(2), df.SamplerConfig(kind="ancestral", steps=s.T), s, eta=0.0)
    np.testing.assert_array_equal(a, b)


def test_ancestral_injects_noise():
    s = df.make_schedule(T=40)
    c = np.zeros((1, 1, 8, 8))
    a = df.sample(_stub, c, np.zeros(1), df.SamplerConfig(kind="ancestral", steps=s.T), s)
    b = df.sample(_stub, c, np.zeros(1), df.SamplerConfig(kind="ancestral", steps=s.T), s, eta=0.0)
    assert not np.array_equal(a, b)


def test_samples_independent_of_batch_composition():
    s = df.make_schedule(T=30)
    c = np.random.default_rng(2).random((4, 1, 8, 8))
    cfg = df.SamplerConfig(kind="ancestral", steps=s.T)
    full = df.sample(_stub, c, np.zeros(4), cfg, s)
    part = df.sample(_stub, c[2:], np.zeros(2), cfg, s, seeds=[(0, 2), (0, 3)])
    np.testing.assert_array_equal(full[2:], part)


def test_steps_above_T_rejected():
    with pytest.raises(ValueError, match="steps"):
        df.sample(_stub, np.zeros((1, 1, 8, 8)), np.zeros(1), df.SamplerConfig(steps=251), df.make_schedule())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.data())
def test_sub_schedule_is_even_and_spans_range(T, data):
    steps = data.draw(st.integers(1, T))
    ts = df.sub_schedule(T, steps)
    assert len(ts) == steps
    assert ts[0] == T
    assert np.all(np.diff(ts) < 0)
    if steps > 1:
        assert ts[-1] == 1
        gaps = -np.diff(ts)
        assert gaps.max() - gaps.min() <= 1


def test_runtime_scales_with_steps():
    calls = []

    def slow(z, t, label, cond):
        calls.append(1)
        time.sleep(0.004)
        return Tensor(np.zeros_like(z))

    s = df.make_schedule()
    c = np.zeros((1, 1, 8, 8))
    t0 = time.perf_counter()
    df.sample(slow, c, np.zeros(1), df.SamplerConfig(steps=10), s)
    short = time.perf_counter() - t0
    t0 = time.perf_counter()
    df.sample(slow, c, np.zeros(1), df.SamplerConfig(steps=40), s)
    long = time.perf_counter() - t0
    assert len(calls) == 50
    assert 4 * 0.7 <= long / short <= 4 * 1.3


def test_model_space_round_trip():
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(df.to_image_space(df.to_model_space(x)), x)
