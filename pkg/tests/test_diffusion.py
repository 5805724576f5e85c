"""Schedule algebra, guidance identities and reverse-step hand cases.

Expected constants below are frozen from hand arithmetic:

  T = 4, beta = (0.1, 0.2, 0.3, 0.4)
    alpha     = (0.9, 0.8, 0.7, 0.6)
    alpha_bar = (0.9, 0.72, 0.504, 0.3024)
  DDIM coefficient at alpha = 0.9, alpha_bar = 0.72:
    c = 0.1 / (sqrt(0.18) + sqrt(0.28)) = 0.104886...
  DDPM step at beta = 0.1, alpha_bar = 0.72:
    (x - 0.1/sqrt(0.28) eps) / sqrt(0.9)
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflexplan.diffusion import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    DEFAULT_T,
    NoiseSchedule,
    cfg_combine,
    cfg_noise,
    ddim_step,
    ddpm_step,
    forward_noise,
    make_schedule,
    predict_x0,
    strided_timesteps,
)

HAND_ALPHA_BAR = (0.9, 0.72, 0.504, 0.3024)


class StubCond:
    def __init__(self, c_full, c_decouple):
        self.c_full = c_full
        self.c_decouple = c_decouple


def hand_schedule() -> NoiseSchedule:
    return make_schedule(T=4, beta_min=0.1, beta_max=0.4)


def test_hand_schedule_tables_exact():
    s = hand_schedule()
    assert np.allclose(s.beta, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    assert np.allclose(s.alpha, [0.9, 0.8, 0.7, 0.6], atol=1e-15)
    assert np.max(np.abs(s.alpha_bar - np.array(HAND_ALPHA_BAR))) < 1e-12


def test_default_schedule_invariants():
    s = make_schedule()
    assert s.T == DEFAULT_T
    assert s.beta[0] == DEFAULT_BETA_MIN and s.beta[-1] == DEFAULT_BETA_MAX
    assert np.all(np.diff(s.alpha_bar) < 0.0)
    assert np.all((s.alpha > 0.0) & (s.alpha < 1.0))
    # terminal signal fraction small enough to start sampling from N(0, I)
    assert s.terminal_ok
    assert s.alpha_bar[-1] < 0.05


def test_make_schedule_rejects_bad_endpoints():
    with pytest.raises(ValueError):
        make_schedule(T=1)
    with pytest.raises(ValueError):
        make_schedule(beta_min=0.0)
    with pytest.raises(ValueError):
        make_schedule(beta_min=0.3, beta_max=0.2)
    with pytest.raises(ValueError):
        make_schedule(beta_max=1.0)


def test_forward_predict_round_trip():
    s = hand_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 5, 4))
    for t in range(1, 5):
        eps = rng.standard_normal(x0.shape)
        x_t = forward_noise(s, x0, t, eps)
        back = predict_x0(s, x_t, eps, t)
        assert np.allclose(back, x0, atol=1e-12)


def test_forward_noise_hand_value():
    s = hand_schedule()
    x0 = np.array(2.0)
    eps = np.array(1.0)
    # t = 2: sqrt(0.72) * 2 + sqrt(0.28)
    expect = math.sqrt(0.72) * 2.0 + math.sqrt(0.28)
    assert abs(float(forward_noise(s, x0, 2, eps)) - expect) < 1e-12


def test_predict_x0_hand_value():
    s = hand_schedule()
    x_t = np.array(1.0)
    eps_hat = np.array(0.5)
    expect = (1.0 - math.sqrt(0.28) * 0.5) / math.sqrt(0.72)
    assert abs(float(predict_x0(s, x_t, eps_hat, 2)) - expect) < 1e-12


def test_timestep_bounds_checked():
    s = hand_schedule()
    x = np.zeros(3)
    for t in (0, 5):
        with pytest.raises(ValueError):
            forward_noise(s, x, t, x)
        with pytest.raises(ValueError):
            ddim_step(s, x, x, t)


def test_cfg_identities():
    rng = np.random.default_rng(1)
    c_full = rng.standard_normal(6)
    c_dec = rng.standard_normal(6)
    cond = StubCond(c_full, c_dec)

    def predictor(x, t, c):
        # deterministic pseudo-model: output depends on the condition
        return np.outer(np.ones(4), c[:4]).ravel() + 0.1 * x

    x = rng.standard_normal(16)
    e_full = predictor(x, 3, c_full)
    e_dec = predictor(x, 3, c_dec)
    assert np.array_equal(cfg_combine(predictor, x, 3, cond, 0.0), e_dec)
    assert np.allclose(cfg_combine(predictor, x, 3, cond, 1.0), e_full, atol=1e-15)
    mid = cfg_combine(predictor, x, 3, cond, 0.5)
    assert np.allclose(mid, 0.5 * (e_full + e_dec), atol=1e-15)
    # cfg_noise is the same combination
    assert np.array_equal(cfg_noise(predictor, x, 3, cond, 0.5), mid)


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(-2.0, 3.0))
def test_cfg_affine_in_lambda(lam):
    rng = np.random.default_rng(4)
    cond = StubCond(rng.standard_normal(8), rng.standard_normal(8))

    def predictor(x, t, c):
        return c + 0.0 * x

    x = np.zeros(8)
    out = cfg_combine(predictor, x, 1, cond, lam)
    expect = cond.c_decouple + lam * (cond.c_full - cond.c_decouple)
    assert np.allclose(out, expect, atol=1e-12)


def test_ddim_coeff_hand_value():
    # alpha = 0.9 with alpha_bar = 0.72 at the same position: a two-step
    # table with alpha_bar = (0.8, 0.72)
    s = NoiseSchedule(beta=np.array([0.2, 0.1]), alpha=np.array([0.8, 0.9]),
                      alpha_bar=np.array([0.8, 0.72]),
                      timesteps=np.array([1, 2]))
    c = s.ddim_coeff(2)
    assert abs(c - 0.1 / (math.sqrt(0.18) + math.sqrt(0.28))) < 1e-15
    assert abs(c - 0.104886193500990) < 1e-12


def test_ddim_t1_coefficient_is_sqrt_beta1():
    s = hand_schedule()
    assert abs(s.ddim_coeff(1) - math.sqrt(0.1)) < 1e-15
    # and the step divides by sqrt(alpha_1)
    x = np.array(1.0)
    eps = np.array(1.0)
    expect = (1.0 - math.sqrt(0.1)) / math.sqrt(0.9)
    assert abs(float(ddim_step(s, x, eps, 1)) - expect) < 1e-12


def test_ddim_step_deterministic_and_linear():
    s = hand_schedule()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4))
    eps = rng.standard_normal(x.shape)
    a = ddim_step(s, x, eps, 3)
    b = ddim_step(s, x, eps, 3)
    assert np.array_equal(a, b)
    # eps_hat = 0 reduces to pure rescaling
    zero = ddim_step(s, x, np.zeros_like(x), 3)
    assert np.allclose(zero, x / math.sqrt(0.7), atol=1e-12)


def test_ddpm_step_hand_value():
    s = NoiseSchedule(beta=np.array([0.2, 0.1]), alpha=np.array([0.8, 0.9]),
                      alpha_bar=np.array([0.8, 0.72]),
                      timesteps=np.array([1, 2]))
    x = np.array(1.0)
    eps = np.array(1.0)
    out = ddpm_step(s, x, eps, 2, None)
    expect = (1.0 - (0.1 / math.sqrt(0.28))) / math.sqrt(0.9)
    assert abs(float(out) - expect) < 1e-12
    # the sigma z term sits inside the 1/sqrt(alpha) factor
    z = np.array(2.0)
    out_z = ddpm_step(s, x, eps, 2, z)
    expect_z = (1.0 - 0.1 / math.sqrt(0.28) + math.sqrt(0.1) * 2.0) / math.sqrt(0.9)
    assert abs(float(out_z) - expect_z) < 1e-12


def test_ddpm_rejects_noise_at_t1():
    s = hand_schedule()
    x = np.zeros(4)
    with pytest.raises(ValueError):
        ddpm_step(s, x, x, 1, np.ones(4))
    out = ddpm_step(s, x, x, 1, None)
    assert out.shape == x.shape


def test_ddpm_noise_variance():
    # over many draws the injected term has variance beta_t / alpha_t
    s = hand_schedule()
    t = 3
    rng = np.random.default_rng(5)
    n = 10_000
    x = np.zeros(n)
    eps = np.zeros(n)
    z = rng.standard_normal(n)
    out = ddpm_step(s, x, eps, t, z)
    var = out.var()
    expect = 0.3 / 0.7
    assert abs(var - expect) / expect < 0.05


def test_strided_timesteps_cover_range():
    ts = strided_timesteps(100, 20)
    assert ts[0] == 1 and ts[-1] == 100
    assert np.all(np.diff(ts) > 0)
    assert ts.size == 20
    assert np.array_equal(strided_timesteps(10, 10), np.arange(1, 11))
    with pytest.raises(ValueError):
        strided_timesteps(10, 11)
    with pytest.raises(ValueError):
        strided_timesteps(10, 0)


def test_subsequence_full_is_identity():
    s = make_schedule(T=10, beta_min=0.02, beta_max=0.2)
    sub = s.subsequence(np.arange(1, 11))
    assert np.allclose(sub.alpha_bar, s.alpha_bar, atol=1e-15)
    assert np.allclose(sub.alpha, s.alpha, atol=1e-12)
    assert np.array_equal(sub.timesteps, s.timesteps)


def test_subsequence_inherits_alpha_bar():
    s = make_schedule(T=100)
    ts = strided_timesteps(100, 20)
    sub = s.subsequence(ts)
    assert sub.T == ts.size
    assert np.allclose(sub.alpha_bar, s.alpha_bar[ts - 1], atol=1e-15)
    # per-step alphas are consecutive alpha-bar ratios; their product
    # telescopes back to the inherited values
    assert np.allclose(np.cumprod(sub.alpha), sub.alpha_bar, atol=1e-12)
    assert np.array_equal(sub.timesteps, ts)


def test_subsequence_rejects_bad_input():
    s = make_schedule(T=10, beta_min=0.02, beta_max=0.2)
    with pytest.raises(ValueError):
        s.subsequence(np.array([3, 3, 5]))
    with pytest.raises(ValueError):
        s.subsequence(np.array([0, 5]))
    with pytest.raises(ValueError):
        s.subsequence(np.array([5, 11]))


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 4), seed=st.integers(0, 1000))
def test_round_trip_property(t, seed):
    s = hand_schedule()
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(12)
    eps = rng.standard_normal(12)
    assert np.allclose(predict_x0(s, forward_noise(s, x0, t, eps), eps, t),
                       x0, atol=1e-10)
