"""Confidence scoring: factor hand values, monotonicity, end-to-end ranges.

Frozen oracles (hand arithmetic):
  sigmoid(5)                       = 0.9933071490757153
  exp(-1) * sigmoid(5)             = 0.3654172789135727  (m1=0.5, mean err 2)
  exp(-0.2)                        = 0.8187307530779818  (m2=1, |dk|=0.01, R=20)
  (0.9933 * 0.8187 * 0.5)^(1/3)    = 0.7408521684546069  (aggregate example)
"""
import math

import numpy as np
import pytest

from reflexplan.confidence import (
    ConfidenceConstants,
    ConfidenceContext,
    ConfidenceInputs,
    aggregate,
    build_confidence_context,
    evaluate,
    geometric_alignment,
    kinematic_consistency,
    prepare_inputs,
    safety_margin,
    trace_row,
)
from reflexplan.scenario import RoadSpec, Straight, build_road, generate_scenario
from reflexplan.trajectory import Trajectory

SIG5 = 1.0 / (1.0 + math.exp(-5.0))
N = 80


def make_inputs(err=0.0, jerk=0.0, dkappa=0.0, kappa_road=0.05, dev=0.0,
                heading_dot=1.0, ttc=10.0, p_offroad=0.0):
    """Synthetic matched quantities with a given error structure."""
    c = ConfidenceConstants()
    a_ref = np.full(N, 2.0)
    return ConfidenceInputs(v=np.full(N, 10.0),
                            kappa_traj=np.full(N, kappa_road + dkappa),
                            a_y=a_ref + err,
                            j_lat=np.full(N, jerk),
                            kappa_road=np.full(N, kappa_road),
                            a_y_ref=a_ref,
                            lateral_dist=np.full(N, dev),
                            heading_dot=heading_dot,
                            ttc=ttc, p_offroad=p_offroad, constants=c)


def straight_context(tracks=(), radii=(), half_width=2.0):
    """Context on a 200 m straight road whose ego frame equals world frame."""
    spec = RoadSpec(segments=(Straight(200.0),), lane_half_width=half_width,
                    speed_limit=12.0)
    center = build_road(spec)
    tr = np.asarray(tracks, dtype=np.float64).reshape(-1, N, 2)
    return ConfidenceContext(center=center, center_xy=center.xy,
                             center_theta=center.theta,
                             obstacle_tracks=tr,
                             obstacle_radii=np.asarray(radii, dtype=np.float64),
                             half_width=half_width,
                             constants=ConfidenceConstants())


def straight_traj(v=10.0, lateral=None, n=N, dt=0.1):
    data = np.zeros((1, n, 4))
    data[0, :, 0] = v * dt * (np.arange(n) + 1)
    data[0, :, 1] = 0.0 if lateral is None else lateral
    data[0, :, 2] = 1.0
    return Trajectory(data=data, dt=dt)


# --------------------------------------------------------------------------
# Factor hand values


def test_kinematic_perfect_match():
    d = kinematic_consistency(make_inputs())
    assert math.isclose(d, SIG5, rel_tol=1e-12)
    assert math.isclose(d, 0.9933071490757153, rel_tol=1e-12)


def test_kinematic_two_mps2_error():
    d = kinematic_consistency(make_inputs(err=2.0))
    assert math.isclose(d, math.exp(-1.0) * SIG5, rel_tol=1e-12)
    assert math.isclose(d, 0.3654172789135727, rel_tol=1e-10)


def test_kinematic_jerk_at_limit():
    # jerk exactly at j_max leaves sigmoid(0) = 1/2
    d = kinematic_consistency(make_inputs(jerk=5.0))
    assert math.isclose(d, 0.5, rel_tol=1e-12)


def test_alignment_curvature_term():
    g = geometric_alignment(make_inputs(dkappa=0.01))
    assert math.isclose(g, math.exp(-0.2), rel_tol=1e-12)
    assert math.isclose(g, 0.8187307530779818, rel_tol=1e-10)


def test_alignment_deviation_ramp():
    assert geometric_alignment(make_inputs(dev=0.5)) == 1.0
    assert math.isclose(geometric_alignment(make_inputs(dev=2.25)), 0.5, rel_tol=1e-12)
    assert geometric_alignment(make_inputs(dev=4.0)) == 0.0
    assert geometric_alignment(make_inputs(dev=50.0)) == 0.0


def test_safety_no_conflict():
    s = safety_margin(make_inputs())
    assert math.isclose(s, 1.0 / (1.0 + math.exp(-15.0)), rel_tol=1e-12)
    assert s > 1.0 - 1e-6


def test_safety_components():
    assert math.isclose(safety_margin(make_inputs(ttc=2.5)),
                        0.5, rel_tol=1e-12)
    assert math.isclose(safety_margin(make_inputs(p_offroad=0.5)),
                        0.5 / (1.0 + math.exp(-15.0)), rel_tol=1e-12)
    assert safety_margin(make_inputs(heading_dot=0.0)) == 0.0
    assert safety_margin(make_inputs(heading_dot=-0.7)) == 0.0


def test_aggregate_hand_value():
    c = aggregate(SIG5, math.exp(-0.2), 0.5)
    assert math.isclose(c, (SIG5 * math.exp(-0.2) * 0.5) ** (1.0 / 3.0), rel_tol=1e-12)
    assert math.isclose(c, 0.7408521684546069, rel_tol=1e-10)


def test_aggregate_rejects_out_of_range():
    for bad in ((1.2, 0.5, 0.5), (0.5, -0.1, 0.5), (0.5, 0.5, math.nan)):
        with pytest.raises(ValueError):
            aggregate(*bad)


def test_sigmoid_paths_stable_at_extremes():
    # huge jerk drives the sigmoid argument to -1e9 without overflow
    assert kinematic_consistency(make_inputs(jerk=1e9)) == 0.0
    assert safety_margin(make_inputs(ttc=1e9)) == 1.0


# --------------------------------------------------------------------------
# Monotonicity


def test_kinematic_monotone_in_error_and_jerk():
    errs = [kinematic_consistency(make_inputs(err=e)) for e in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    jerks = [kinematic_consistency(make_inputs(jerk=j)) for j in (0.0, 2.0, 5.0, 8.0)]
    assert all(a > b for a, b in zip(jerks, jerks[1:]))


def test_alignment_monotone_in_curvature_error():
    vals = [geometric_alignment(make_inputs(dkappa=d)) for d in (0.0, 0.005, 0.01, 0.03)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_safety_monotone_in_ttc():
    vals = [safety_margin(make_inputs(ttc=t)) for t in (0.5, 1.5, 2.5, 4.0, 10.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------------------
# Matching and end-to-end


def test_ttc_from_crossing_an_obstacle():
    # obstacle parked at (30, 0), r = 0.5; ego at x = k+1 m per step, so the
    # first point within 1.5 m is x = 29 at index 28: TTC = 2.9 s
    ctx = straight_context(tracks=[np.tile([30.0, 0.0], (N, 1))], radii=[0.5])
    inputs = prepare_inputs(ctx, straight_traj())
    assert math.isclose(inputs.ttc, 2.9, rel_tol=1e-12)
    rep = evaluate(ctx, straight_traj())
    assert rep.ttc == inputs.ttc
    # sigmoid((2.9 - 2.5) / 0.5) = sigmoid(0.8)
    assert math.isclose(rep.s_margin, 1.0 / (1.0 + math.exp(-0.8)), rel_tol=1e-12)


def test_ttc_cap_without_obstacles():
    ctx = straight_context()
    inputs = prepare_inputs(ctx, straight_traj())
    assert inputs.ttc == 10.0 and inputs.p_offroad == 0.0
    assert math.isclose(inputs.heading_dot, 1.0, abs_tol=1e-12)


def test_offroad_fraction_counts_corridor_exits():
    ctx = straight_context(half_width=2.0)
    offsets = np.where(np.arange(N) % 2 == 0, 3.0, 0.0)
    inputs = prepare_inputs(ctx, straight_traj(lateral=offsets))
    assert math.isclose(inputs.p_offroad, 0.5, rel_tol=1e-12)


def test_perfect_straight_drive_scores_high():
    rep = evaluate(straight_context(), straight_traj())
    assert rep.c > 0.95
    assert 0.0 <= rep.d_kin <= 1.0 and 0.0 <= rep.g_align <= 1.0
    assert 0.0 <= rep.s_margin <= 1.0


def test_ground_truth_scores_high_all_kinds():
    for kind in ("u_turn", "sharp_curve", "gentle_curve", "straight"):
        for seed in (0, 1):
            scene, gt = generate_scenario(kind, seed)
            ctx = build_confidence_context(scene)
            rep = evaluate(ctx, gt)
            assert rep.c > 0.8, f"{kind} seed {seed}: c = {rep.c:.3f}"


def test_noisy_trajectory_scores_low():
    scene, gt = generate_scenario("sharp_curve", 0)
    ctx = build_confidence_context(scene)
    noisy = Trajectory(data=gt.data + np.random.default_rng(0).normal(0, 1.5, gt.data.shape),
                       dt=gt.dt)
    assert evaluate(ctx, noisy).c < 0.2
    assert evaluate(ctx, noisy).c < evaluate(ctx, gt).c


def test_degenerate_trajectory_survives():
    rep = evaluate(straight_context(), Trajectory(data=np.zeros((1, N, 4)), dt=0.1))
    assert 0.0 <= rep.c <= 1.0 and math.isfinite(rep.c)


def test_context_shapes_cover_neighbors_and_statics():
    scene, _ = generate_scenario("gentle_curve", 3)
    ctx = build_confidence_context(scene)
    k = scene.n_neighbors + scene.static_obstacles.shape[0]
    assert ctx.obstacle_tracks.shape == (k, 80, 2)
    assert ctx.obstacle_radii.shape == (k,)


def test_trace_row_copies_report():
    rep = evaluate(straight_context(), straight_traj())
    row = trace_row(12, "reflect", rep)
    assert (row.t, row.phase, row.c) == (12, "reflect", rep.c)
    assert (row.d_kin, row.g_align, row.s_margin) == (rep.d_kin, rep.g_align, rep.s_margin)
