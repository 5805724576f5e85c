"""Tests for the confidence-gated reflection cycle.

Frozen oracles
--------------
Projection reweighting at v = 10, kappa = 0.05 (N = 1 + v^2 + 2|kv| = 102):
    pure lateral unit      -> lat' = v^2 / N   = 100/102 ~ 0.980392
    pure longitudinal unit -> lat' = 2 k v / N =   1/102 ~ 0.009804
Hand schedule beta = (0.1, 0.2, 0.3, 0.4) at t = 2:
    sqrt(alpha_2) = 0.8944271909999159
    c_2 = beta_2 / (sqrt(alpha_2 - abar_2) + sqrt(1 - abar_2))
        = 0.2 / (sqrt(0.08) + sqrt(0.28)) = 0.2463075497382992
"""
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflexplan.confidence import ConfidenceReport, build_confidence_context
from reflexplan.diffusion import NoiseSchedule, ddim_step, make_schedule
from reflexplan.reflection import (ReflectionConfig, condition_gradient,
                                   project_onto_manifold, reflect_once,
                                   reflection_loop, renoise)
from reflexplan.scenario import generate_scenario
from reflexplan.trajectory import Trajectory, encode_state, kinematics

SQRT_A2 = 0.8944271909999159
C2 = 0.2463075497382992


def hand_schedule() -> NoiseSchedule:
    return make_schedule(T=4, beta_min=0.1, beta_max=0.4)


def arc_traj(radius=20.0, speed=10.0, steps=40, dt=0.1, rows=1) -> Trajectory:
    w = speed / radius
    t = np.arange(steps) * dt
    data = np.zeros((rows, steps, 4))
    data[0, :, 0] = radius * np.sin(w * t)
    data[0, :, 1] = radius * (1.0 - np.cos(w * t))
    data[0, :, 2] = np.cos(w * t)
    data[0, :, 3] = np.sin(w * t)
    return Trajectory(data=data, dt=dt)


@dataclasses.dataclass
class StubCond:
    c_full: np.ndarray
    c_decouple: np.ndarray


def marker_cond(dim=6) -> StubCond:
    # First entry tags which branch a predictor call came from.
    return StubCond(c_full=np.full(dim, 1.0), c_decouple=np.full(dim, 2.0))


class BranchPred:
    """Constant output per condition branch, ignoring the state."""

    def __init__(self, e_full: np.ndarray, e_dec: np.ndarray):
        self.e_full = e_full
        self.e_dec = e_dec
        self.calls = 0
        self.embed_ts: list[int] = []

    def __call__(self, x, t, c):
        self.calls += 1
        self.embed_ts.append(t)
        return self.e_full if c[0] == 1.0 else self.e_dec


class ConstPred:
    def __init__(self, eps0: np.ndarray):
        self.eps0 = eps0
        self.calls = 0

    def __call__(self, x, t, c):
        self.calls += 1
        return self.eps0


class SeqPred:
    """Plays back one output per call; repeats the last one after that."""

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.calls = 0

    def __call__(self, x, t, c):
        out = self.outputs[min(self.calls, len(self.outputs) - 1)]
        self.calls += 1
        return out


# ---------------------------------------------------------------------------
# condition gradient


def test_condition_gradient_endpoints_select_branches():
    shape = (1, 8, 4)
    e_full = np.full(shape, 3.0)
    e_dec = np.full(shape, 7.0)
    cond = marker_cond()
    x = np.zeros(shape)
    d0 = condition_gradient(BranchPred(e_full, e_dec), x, 2, cond, 0.0)
    d1 = condition_gradient(BranchPred(e_full, e_dec), x, 2, cond, 1.0)
    assert np.array_equal(d0, e_dec)
    assert np.array_equal(d1, e_full)


def test_condition_gradient_exactly_two_calls():
    pred = BranchPred(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)))
    condition_gradient(pred, np.zeros((1, 4, 4)), 3, marker_cond(), 0.5)
    assert pred.calls == 2


def test_condition_gradient_constant_predictor_ignores_lambda2():
    eps0 = np.arange(16.0).reshape(1, 4, 4)
    cond = marker_cond()
    x = np.zeros((1, 4, 4))
    base = condition_gradient(ConstPred(eps0), x, 2, cond, 0.0)
    for lam in (0.3, 1.0, 2.5, -1.0):
        out = condition_gradient(ConstPred(eps0), x, 2, cond, lam)
        assert np.array_equal(out, base)
    assert np.array_equal(base, eps0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-2.0, 3.0), b=st.floats(-2.0, 3.0))
def test_condition_gradient_affine_in_lambda2(a, b):
    rng = np.random.default_rng(7)
    e_full = rng.normal(size=(1, 6, 4))
    e_dec = rng.normal(size=(1, 6, 4))
    cond = marker_cond()
    x = np.zeros((1, 6, 4))

    def grad(lam):
        return condition_gradient(BranchPred(e_full, e_dec), x, 2, cond, lam)

    mid = grad(0.5 * (a + b))
    avg = 0.5 * (grad(a) + grad(b))
    np.testing.assert_allclose(mid, avg, atol=1e-12)


# ---------------------------------------------------------------------------
# manifold projection


def test_projection_hand_value_pure_lateral():
    clean = arc_traj(radius=20.0, speed=10.0)
    prof = kinematics(clean, 0)
    k = 10
    u = prof.tangent[k]
    nrm = np.array([-u[1], u[0]])
    delta = np.zeros((1, clean.steps, 4))
    delta[0, k, :2] = nrm

    out = project_onto_manifold(delta, clean, "physics")
    lat = out[0, k, :2] @ nrm
    lon = out[0, k, :2] @ u

    v, kap = prof.v[k], prof.kappa[k]
    n_total = 1.0 + v * v + 2.0 * abs(kap * v)
    assert abs(lat - v * v / n_total) < 1e-12
    assert abs(lon) < 1e-12
    # Finite differences put v, kappa within ~0.1% of (10, 0.05).
    assert lat == pytest.approx(100.0 / 102.0, rel=2e-3)


def test_projection_hand_value_pure_longitudinal():
    clean = arc_traj(radius=20.0, speed=10.0)
    prof = kinematics(clean, 0)
    k = 10
    u = prof.tangent[k]
    nrm = np.array([-u[1], u[0]])
    delta = np.zeros((1, clean.steps, 4))
    delta[0, k, :2] = u

    out = project_onto_manifold(delta, clean, "physics")
    lat = out[0, k, :2] @ nrm
    lon = out[0, k, :2] @ u

    v, kap = prof.v[k], prof.kappa[k]
    n_total = 1.0 + v * v + 2.0 * abs(kap * v)
    assert abs(lat - 2.0 * kap * v / n_total) < 1e-12
    assert abs(lon - 1.0) < 1e-12
    assert lat == pytest.approx(1.0 / 102.0, rel=2e-3)


def test_projection_identity_mode_returns_input():
    delta = np.ones((1, 10, 4))
    clean = arc_traj(steps=10)
    assert project_onto_manifold(delta, clean, "identity") is delta


def test_projection_unknown_mode_rejected():
    with pytest.raises(ValueError, match="projection"):
        project_onto_manifold(np.zeros((1, 10, 4)), arc_traj(steps=10), "snap")


def test_projection_touches_only_ego_positions():
    rng = np.random.default_rng(3)
    clean = arc_traj(rows=3)
    delta = rng.normal(size=(3, clean.steps, 4))
    out = project_onto_manifold(delta, clean, "physics")
    assert np.array_equal(out[1:], delta[1:])          # neighbour rows
    assert np.array_equal(out[0, :, 2:], delta[0, :, 2:])  # heading channels
    assert not np.array_equal(out[0, :, :2], delta[0, :, :2])


def test_projection_degenerate_steps_pass_through():
    # A parked ego has zero-length arcs everywhere; nothing may move.
    clean = Trajectory(data=np.zeros((1, 12, 4)), dt=0.1)
    rng = np.random.default_rng(4)
    delta = rng.normal(size=(1, 12, 4))
    out = project_onto_manifold(delta, clean, "physics")
    assert np.array_equal(out, delta)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000))
def test_projection_never_expands_local_frame_sup_norm(seed):
    # In the tangent frame: lon is kept and
    # |lat'| <= (v^2 |lat| + 2|kv||lon|) / (1 + v^2 + 2|kv|) < max(|lat|, |lon|).
    rng = np.random.default_rng(seed)
    clean = arc_traj(radius=rng.uniform(8, 80), speed=rng.uniform(2, 15))
    delta = rng.normal(size=(1, clean.steps, 4))
    out = project_onto_manifold(delta, clean, "physics")
    prof = kinematics(clean, 0)
    u = prof.tangent
    nrm = np.column_stack([-u[:, 1], u[:, 0]])
    lon0 = (delta[0, :, :2] * u).sum(axis=1)
    lat0 = (delta[0, :, :2] * nrm).sum(axis=1)
    lon1 = (out[0, :, :2] * u).sum(axis=1)
    lat1 = (out[0, :, :2] * nrm).sum(axis=1)
    np.testing.assert_allclose(lon1, lon0, atol=1e-12)
    assert np.all(np.abs(lat1) <= np.maximum(np.abs(lat0), np.abs(lon0)) + 1e-12)


# ---------------------------------------------------------------------------
# renoise


def test_renoise_zero_estimate_scales_by_sqrt_alpha():
    sched = hand_schedule()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8, 4))
    out = renoise(sched, x, np.zeros_like(x), 2)
    # Bitwise: nothing but the sqrt(alpha) scaling may remain.
    assert np.array_equal(out, np.sqrt(sched.alpha[1]) * x)
    assert np.allclose(out, SQRT_A2 * x, atol=1e-12)


def test_renoise_default_b_is_the_ddim_coefficient():
    sched = hand_schedule()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 8, 4))
    e = rng.normal(size=(1, 8, 4))
    assert np.array_equal(renoise(sched, x, e, 2),
                          renoise(sched, x, e, 2, b=sched.ddim_coeff(2)))
    ones = np.ones((1, 3, 4))
    out = renoise(sched, ones, ones, 2)
    assert np.allclose(out, SQRT_A2 + C2, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(2, 4), seed=st.integers(0, 500))
def test_renoise_then_ddim_step_is_identity(t, seed):
    sched = hand_schedule()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 6, 4))
    e = rng.normal(size=(1, 6, 4))
    back = ddim_step(sched, renoise(sched, x, e, t), e, t)
    assert np.max(np.abs(back - x)) < 1e-9


def test_renoise_validates_timestep():
    sched = hand_schedule()
    x = np.zeros((1, 4, 4))
    with pytest.raises(ValueError):
        renoise(sched, x, x, 0)
    with pytest.raises(ValueError):
        renoise(sched, x, x, 5)


# ---------------------------------------------------------------------------
# one reflection cycle


def fixed_point_cfg(**over) -> ReflectionConfig:
    base = dict(gamma=0.8, lambda2=0.7, r_max=2,
                b_mode="match_ddim", projection="identity")
    base.update(over)
    return ReflectionConfig(**base)


def test_reflect_once_fixed_point_for_constant_denoiser():
    # Matched injection scale makes one cycle a no-op when the noise
    # estimate cannot change: sqrt(a) x + c e0 - c e0, then / sqrt(a).
    sched = make_schedule(20, 1e-4, 0.06)
    rng = np.random.default_rng(5)
    clean = arc_traj(steps=12)
    cond = marker_cond()
    for t in range(2, 21, 3):
        x = rng.normal(size=(2, 12, 4))
        eps0 = rng.normal(size=(2, 12, 4))
        out = reflect_once(ConstPred(eps0), x, t, t, sched, cond,
                           fixed_point_cfg(), lambda1=0.9, clean=clean)
        assert out.ok
        assert out.predictor_calls == 4
        assert np.max(np.abs(out.x - x)) < 1e-9
        assert np.all(np.isfinite(out.x0_injected))
        assert np.all(np.isfinite(out.x0_denoised))


def test_reflect_once_zero_b_zero_estimate_is_identity():
    # Only the sqrt(alpha) round trip remains; one rounding each way.
    sched = hand_schedule()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 10, 4))
    zero = ConstPred(np.zeros_like(x))
    cfg = fixed_point_cfg(b_mode="constant", b_const=0.0)
    out = reflect_once(zero, x, 2, 2, sched, marker_cond(), cfg, 0.9,
                       arc_traj(steps=10))
    assert out.ok
    assert np.max(np.abs(out.x - x)) < 1e-14


def test_reflect_once_constant_b_changes_the_injection():
    sched = hand_schedule()
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 10, 4))
    e = rng.normal(size=(1, 10, 4))
    clean = arc_traj(steps=10)
    cond = marker_cond()
    matched = reflect_once(ConstPred(e), x, 2, 2, sched, cond,
                           fixed_point_cfg(), 0.9, clean)
    shifted = reflect_once(ConstPred(e), x, 2, 2, sched, cond,
                           fixed_point_cfg(b_mode="constant", b_const=0.5),
                           0.9, clean)
    assert not np.allclose(matched.x, shifted.x)


def test_reflect_once_uses_embed_timestep_for_the_predictor():
    sched = make_schedule(20, 1e-4, 0.06)
    pred = BranchPred(np.zeros((1, 8, 4)), np.zeros((1, 8, 4)))
    reflect_once(pred, np.zeros((1, 8, 4)), 2, 17, sched, marker_cond(),
                 fixed_point_cfg(), 0.9, arc_traj(steps=8))
    assert pred.embed_ts == [17] * 4


def test_reflect_once_aborts_on_nonfinite_injection():
    sched = hand_schedule()
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 8, 4))
    nan_pred = ConstPred(np.full((1, 8, 4), np.nan))
    out = reflect_once(nan_pred, x, 2, 2, sched, marker_cond(),
                       fixed_point_cfg(), 0.9, arc_traj(steps=8))
    assert not out.ok
    assert out.predictor_calls == 2
    assert np.array_equal(out.x, x)


def test_reflect_once_aborts_on_nonfinite_redenoise():
    sched = hand_schedule()
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 8, 4))
    zeros = np.zeros_like(x)
    bad = np.full_like(x, np.nan)
    out = reflect_once(SeqPred([zeros, zeros, bad, bad]), x, 2, 2, sched,
                       marker_cond(), fixed_point_cfg(), 0.9,
                       arc_traj(steps=8))
    assert not out.ok
    assert out.predictor_calls == 4
    assert np.array_equal(out.x, x)


def test_reflect_once_projection_shifts_only_ego_positions():
    # With a state-blind predictor the physics and identity routes differ
    # exactly by the projected injection, so only ego positions move.
    sched = hand_schedule()
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 12, 4))
    e_full = rng.normal(size=(3, 12, 4))
    e_dec = rng.normal(size=(3, 12, 4))
    clean = arc_traj(rows=3, steps=12)
    cond = marker_cond()
    phys = reflect_once(BranchPred(e_full, e_dec), x, 2, 2, sched, cond,
                        fixed_point_cfg(projection="physics", lambda2=0.4),
                        0.9, clean)
    ident = reflect_once(BranchPred(e_full, e_dec), x, 2, 2, sched, cond,
                         fixed_point_cfg(projection="identity", lambda2=0.4),
                         0.9, clean)
    diff = phys.x - ident.x
    assert np.array_equal(diff[1:], np.zeros_like(diff[1:]))
    assert np.array_equal(diff[0, :, 2:], np.zeros_like(diff[0, :, 2:]))
    assert np.any(diff[0, :, :2] != 0.0)


# ---------------------------------------------------------------------------
# gated loop


def loop_fixture():
    scene, gt = generate_scenario("straight", 3)
    ctx = build_confidence_context(scene)
    x_prev = encode_state(gt)
    return ctx, gt, x_prev


def entry_report(c: float) -> ConfidenceReport:
    return ConfidenceReport(c=c, d_kin=c, g_align=c, s_margin=c,
                            ttc=5.0, p_offroad=0.0, d_dev=0.0)


def run_loop(pred, gamma, entry_c, trace=True, r_max=2):
    ctx, gt, x_prev = loop_fixture()
    sched = make_schedule(20, 1e-4, 0.06)
    cfg = ReflectionConfig(gamma=gamma, lambda2=0.0, r_max=r_max)
    return reflection_loop(pred, x_prev, 2, 2, sched, marker_cond(), cfg,
                           0.9, ctx, entry_report(entry_c), gt, gt.dt,
                           trace=trace), x_prev


def zero_pred():
    return ConstPred(np.zeros((1, 80, 4)))


def test_loop_confident_entry_skips_reflection():
    res, x_prev = run_loop(zero_pred(), gamma=0.8, entry_c=0.93)
    assert res.attempts == 0
    assert res.predictor_calls == 0
    assert res.rows == []
    assert not res.aborted
    assert res.exit_c == res.entry_c == 0.93
    assert np.array_equal(res.x, x_prev)


def test_loop_gamma_one_spends_the_full_budget():
    pred = zero_pred()
    res, _ = run_loop(pred, gamma=1.0, entry_c=0.93)
    assert res.attempts == 2
    assert res.predictor_calls == 8 == pred.calls
    assert [r.phase for r in res.rows] == ["reflect", "reflect-denoise"] * 2
    assert all(r.t == 2 for r in res.rows)


def test_loop_call_budget_bounded_by_attempts():
    for r_max in (1, 2, 3):
        res, _ = run_loop(zero_pred(), gamma=1.0, entry_c=0.1, r_max=r_max)
        assert res.predictor_calls == 4 * res.attempts
        assert res.attempts <= r_max


def test_loop_trigger_count_monotone_in_gamma():
    counts = []
    for gamma in (0.0, 0.3, 0.6, 0.9, 1.0):
        res, _ = run_loop(zero_pred(), gamma=gamma, entry_c=0.5)
        counts.append(res.attempts)
    assert counts == sorted(counts)
    assert counts[0] == 0
    assert counts[-1] == 2


def test_loop_abort_keeps_state_and_reports():
    pred = ConstPred(np.full((1, 80, 4), np.nan))
    res, x_prev = run_loop(pred, gamma=1.0, entry_c=0.1)
    assert res.aborted
    assert res.attempts == 1
    assert res.predictor_calls == 2
    assert res.rows == []
    assert np.array_equal(res.x, x_prev)


def test_loop_exit_c_tracks_last_denoise_row():
    res, _ = run_loop(zero_pred(), gamma=1.0, entry_c=0.2)
    assert res.rows[-1].phase == "reflect-denoise"
    assert res.exit_c == res.rows[-1].c
    assert 0.0 <= res.exit_c <= 1.0


def test_loop_untraced_matches_traced_states():
    traced, _ = run_loop(zero_pred(), gamma=1.0, entry_c=0.2, trace=True)
    plain, _ = run_loop(zero_pred(), gamma=1.0, entry_c=0.2, trace=False)
    assert np.array_equal(traced.x, plain.x)
    assert traced.attempts == plain.attempts
    assert plain.rows == []


@pytest.mark.parametrize("field,value", [
    ("gamma", -0.1),
    ("gamma", 1.5),
    ("r_max", 0),
    ("b_mode", "resample"),
    ("projection", "none"),
])
def test_config_validation_rejects(field, value):
    cfg = ReflectionConfig(**{field: value})
    with pytest.raises(ValueError):
        cfg.validate()


def test_config_defaults_validate():
    ReflectionConfig().validate()
