"""Three-factor trajectory confidence.

Each factor lands in [0, 1] and the aggregate is their geometric mean:

  kinematic consistency  exp(-m1 * mean |a_y - a_y_ref|) * sigmoid(j_max - max |j_lat|)
  geometric alignment    exp(-m2 * mean(|k_traj - k_road| * R_curve)) * R_dev
  safety margin          sigmoid((TTC - 2.5) / 0.5) * (1 - p_offroad) * max(0, cos dpsi)

a_y_ref is the road's own lateral demand kappa_road * v^2 at the matched
centerline point, using the trajectory's speed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import Centerline, SceneContext, build_road, match_centerline, road_pose_at, world_to_ego
from .trajectory import HORIZON_STEPS, TIME_STEP, Trajectory, kinematics


@dataclass(frozen=True)
class ConfidenceConstants:
    m1: float = 0.5
    m2: float = 1.0
    j_max: float = 5.0          # m/s^3
    d_safe: float = 0.5         # m of tolerated centerline deviation
    d_max: float = 3.5          # m where the deviation term reaches zero
    ttc_mid: float = 2.5        # s, sigmoid midpoint
    ttc_scale: float = 0.5      # s
    ttc_cap: float = 10.0       # s
    collision_buffer: float = 1.0  # m added to obstacle radii
    kappa_floor: float = 1e-3   # 1/m floor for the curvature-radius weight


@dataclass(frozen=True)
class ConfidenceContext:
    """Scene geometry prepared once per planning tick, in the ego frame."""

    center: Centerline
    center_xy: np.ndarray        # (N, 2) ego frame
    center_theta: np.ndarray     # (N,) ego frame
    obstacle_tracks: np.ndarray  # (K, steps, 2) predicted ego-frame positions
    obstacle_radii: np.ndarray   # (K,)
    half_width: float
    constants: ConfidenceConstants


def build_confidence_context(scene: SceneContext,
                             constants: ConfidenceConstants | None = None,
                             steps: int = HORIZON_STEPS,
                             dt: float = TIME_STEP) -> ConfidenceContext:
    constants = constants or ConfidenceConstants()
    center = build_road(scene.road)
    pose = scene.ego
    heading = math.atan2(pose[3], pose[2])
    cxy = world_to_ego(pose, center.xy)
    ctheta = center.theta - heading

    tracks = []
    radii = []
    t_grid = (np.arange(steps) + 1) * dt
    for j, a in enumerate(scene.neighbor_attrs):
        s = a.s0 + a.speed * t_grid
        xy, theta, _ = road_pose_at(scene.road, s)
        nx = -np.sin(theta) * a.lateral
        ny = np.cos(theta) * a.lateral
        world = xy + np.column_stack([nx, ny])
        tracks.append(world_to_ego(pose, world))
        radii.append(0.5 * max(a.length, a.width))
    for ox, oy, r in scene.static_obstacles:
        p = world_to_ego(pose, np.array([[ox, oy]]))[0]
        tracks.append(np.tile(p, (steps, 1)))
        radii.append(float(r))
    tracks_arr = np.asarray(tracks).reshape(-1, steps, 2)
    return ConfidenceContext(center=center, center_xy=cxy, center_theta=ctheta,
                             obstacle_tracks=tracks_arr,
                             obstacle_radii=np.asarray(radii, dtype=np.float64),
                             half_width=center.half_width, constants=constants)


@dataclass(frozen=True)
class ConfidenceInputs:
    """Matched per-step quantities feeding the three factors."""

    v: np.ndarray
    kappa_traj: np.ndarray
    a_y: np.ndarray
    j_lat: np.ndarray
    kappa_road: np.ndarray
    a_y_ref: np.ndarray
    lateral_dist: np.ndarray    # unsigned distance to the centerline
    heading_dot: float          # cos of final heading error vs road tangent
    ttc: float                  # s, capped
    p_offroad: float            # fraction of steps outside the corridor
    constants: ConfidenceConstants


def _sigmoid(x: float) -> float:
    # stable for any magnitude; garbage trajectories produce huge |x|
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _match_ego_frame(ctx: ConfidenceContext, pts: np.ndarray):
    d2 = ((pts[:, None, :] - ctx.center_xy[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    rel = pts - ctx.center_xy[idx]
    tx = np.cos(ctx.center_theta[idx])
    ty = np.sin(ctx.center_theta[idx])
    lateral = -rel[:, 0] * ty + rel[:, 1] * tx
    return idx, lateral


def prepare_inputs(ctx: ConfidenceContext, traj: Trajectory, row: int = 0) -> ConfidenceInputs:
    prof = kinematics(traj, row)
    pts = traj.positions(row)
    idx, lateral = _match_ego_frame(ctx, pts)
    kappa_road = ctx.center.kappa[idx]
    a_y_ref = kappa_road * prof.v ** 2

    n = pts.shape[0]
    ttc = ctx.constants.ttc_cap
    if ctx.obstacle_tracks.shape[0]:
        steps = min(n, ctx.obstacle_tracks.shape[1])
        d = np.linalg.norm(ctx.obstacle_tracks[:, :steps, :] - pts[None, :steps, :], axis=2)
        conflict = d < (ctx.obstacle_radii[:, None] + ctx.constants.collision_buffer)
        hits = np.nonzero(conflict.any(axis=0))[0]
        if hits.size:
            ttc = min(ttc, (hits[0] + 1) * traj.dt)

    p_off = float((np.abs(lateral) > ctx.half_width).mean())
    h = traj.data[row, -1, 2:4]
    hn = np.hypot(h[0], h[1])
    h = h / hn if hn > 1e-9 else prof.tangent[-1]
    tang = np.array([np.cos(ctx.center_theta[idx[-1]]), np.sin(ctx.center_theta[idx[-1]])])
    return ConfidenceInputs(v=prof.v, kappa_traj=prof.kappa, a_y=prof.a_y,
                            j_lat=prof.j_lat, kappa_road=kappa_road,
                            a_y_ref=a_y_ref, lateral_dist=np.abs(lateral),
                            heading_dot=float(h @ tang), ttc=float(ttc),
                            p_offroad=p_off, constants=ctx.constants)


def kinematic_consistency(inputs: ConfidenceInputs) -> float:
    c = inputs.constants
    err = float(np.mean(np.abs(inputs.a_y - inputs.a_y_ref)))
    jerk = float(np.max(np.abs(inputs.j_lat)))
    return math.exp(-c.m1 * err) * _sigmoid(c.j_max - jerk)


def geometric_alignment(inputs: ConfidenceInputs) -> float:
    c = inputs.constants
    r_curve = 1.0 / np.maximum(np.abs(inputs.kappa_road), c.kappa_floor)
    curv = math.exp(-c.m2 * float(np.mean(np.abs(inputs.kappa_traj - inputs.kappa_road) * r_curve)))
    d_dev = float(np.max(inputs.lateral_dist))
    r_dev = 1.0 - max(0.0, d_dev - c.d_safe) / c.d_max
    return curv * min(1.0, max(0.0, r_dev))


def safety_margin(inputs: ConfidenceInputs) -> float:
    c = inputs.constants
    ttc_term = _sigmoid((inputs.ttc - c.ttc_mid) / c.ttc_scale)
    return ttc_term * (1.0 - inputs.p_offroad) * max(0.0, inputs.heading_dot)


def aggregate(d_kin: float, g_align: float, s_margin: float) -> float:
    """Geometric mean of the three factors; inputs must be in [0, 1]."""
    for name, val in (("d_kin", d_kin), ("g_align", g_align), ("s_margin", s_margin)):
        if not 0.0 <= val <= 1.0 or not math.isfinite(val):
            raise ValueError(f"{name} = {val} outside [0, 1]")
    return (d_kin * g_align * s_margin) ** (1.0 / 3.0)


@dataclass(frozen=True)
class ConfidenceReport:
    c: float
    d_kin: float
    g_align: float
    s_margin: float
    ttc: float
    p_offroad: float
    d_dev: float


def evaluate(ctx: ConfidenceContext, traj: Trajectory, row: int = 0) -> ConfidenceReport:
    """Full confidence pipeline for a clean-trajectory estimate."""
    inputs = prepare_inputs(ctx, traj, row)
    d = kinematic_consistency(inputs)
    g = geometric_alignment(inputs)
    s = safety_margin(inputs)
    return ConfidenceReport(c=aggregate(d, g, s), d_kin=d, g_align=g, s_margin=s,
                            ttc=inputs.ttc, p_offroad=inputs.p_offroad,
                            d_dev=float(np.max(inputs.lateral_dist)))


@dataclass
class TraceRow:
    t: int          # denoising timestep (0 = final output)
    phase: str      # normal | reflect | reflect-denoise
    d_kin: float
    g_align: float
    s_margin: float
    c: float


def trace_row(t: int, phase: str, report: ConfidenceReport) -> TraceRow:
    return TraceRow(t=t, phase=phase, d_kin=report.d_kin, g_align=report.g_align,
                    s_margin=report.s_margin, c=report.c)
