"""Closed-loop-lite evaluation: replanning rollouts, driving score, paired
planner comparison and a latency bench.

A planner is a callable (scene, seed) -> PlanOutput whose trajectory is in
the ego frame of the scene it was given.  Rollouts execute the first
replan interval of each plan verbatim while neighbours continue at
constant velocity.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .confidence import ConfidenceConstants, build_confidence_context
from .diffusion import NoiseSchedule
from .reflection import ReflectionConfig
from .sampling import SamplerConfig, SampleResult, sample
from .scenario import (
    HISTORY_STEPS,
    NeighborAttrs,
    SceneContext,
    assemble_conditions,
    build_road,
    ground_truth,
    match_centerline,
    road_pose_at,
    _neighbor_pose,
    ego_to_world,
)
from .trajectory import TIME_STEP, Trajectory, coupling_violations, kinematics

EGO_RADIUS = 1.0
COMFORT_AY = 6.0
COMFORT_JERK = 5.0
STALL_WINDOW_S = 3.0
STALL_DISTANCE = 0.5


@dataclass
class PlanOutput:
    trajectory: Trajectory
    info: SampleResult | None = None


def make_replay_planner():
    """Planner that replays the comfort-profile ground truth."""
    def plan(scene: SceneContext, seed: int) -> PlanOutput:
        return PlanOutput(trajectory=ground_truth(scene))
    return plan


def make_diffusion_planner(predictor, schedule: NoiseSchedule,
                           sampler: SamplerConfig,
                           reflection: ReflectionConfig | None,
                           constants: ConfidenceConstants | None = None,
                           trace: bool = True):
    """Planner wrapping the reverse-diffusion sampler.

    A confidence context is always built so reflected and unreflected
    planners run the same per-step bookkeeping.
    """
    def plan(scene: SceneContext, seed: int) -> PlanOutput:
        cond = assemble_conditions(scene)
        ctx = build_confidence_context(scene, constants)
        result = sample(predictor, cond, schedule, replace(sampler, seed=seed),
                        reflection=reflection, confidence_ctx=ctx, trace=trace)
        return PlanOutput(trajectory=result.trajectory, info=result)
    return plan


def advance_scene(scene: SceneContext, ego_state: tuple, elapsed: float) -> SceneContext:
    """Scene as seen `elapsed` seconds later from a new ego state."""
    center = build_road(scene.road)
    attrs = tuple(replace(a, s0=a.s0 + a.speed * elapsed) for a in scene.neighbor_attrs)
    hist = np.zeros((len(attrs), HISTORY_STEPS, 5))
    for j, a in enumerate(attrs):
        for i in range(HISTORY_STEPS):
            t = -(HISTORY_STEPS - 1 - i) * TIME_STEP
            x, y, th = _neighbor_pose(center, a, t)
            hist[j, i] = (x, y, math.cos(th), math.sin(th), a.speed)
    _, s, _, _ = match_centerline(center, np.asarray([ego_state[:2]]))
    return replace(scene, ego=ego_state, ego_s=float(s[0]), neighbors=hist,
                   neighbor_attrs=attrs)


@dataclass
class RolloutResult:
    executed: np.ndarray           # (n, 4) world-frame x, y, cos, sin
    times: np.ndarray              # absolute time of each executed point
    collision: bool
    out_of_corridor: bool
    stalled: bool
    corridor_fraction: float
    start_s: float
    end_s: float
    plan_violation_rates: list = field(default_factory=list)
    plan_infos: list = field(default_factory=list)
    wall_time: float = 0.0


def _neighbor_world_at(scene: SceneContext, center, t: float):
    pts = []
    radii = []
    for a in scene.neighbor_attrs:
        x, y, _ = _neighbor_pose(center, a, t)
        pts.append((x, y))
        radii.append(0.5 * max(a.length, a.width))
    for ox, oy, r in scene.static_obstacles:
        pts.append((ox, oy))
        radii.append(float(r))
    if not pts:
        return np.zeros((0, 2)), np.zeros(0)
    return np.asarray(pts), np.asarray(radii)


def rollout(planner, scene: SceneContext, seed: int = 0,
            replan_interval_s: float = 1.0, horizon_s: float = 15.0) -> RolloutResult:
    """Execute plans tick by tick; stops early on collision."""
    if replan_interval_s <= 0 or horizon_s < replan_interval_s:
        raise ValueError("need 0 < replan_interval_s <= horizon_s")
    center = build_road(scene.road)
    n_exec = int(round(replan_interval_s / TIME_STEP))
    n_ticks = int(round(horizon_s / replan_interval_s))
    start_s = scene.ego_s

    t_start = time.perf_counter()
    cur = scene
    elapsed = 0.0
    executed = []
    times = []
    collision = False
    out_flag = False
    inside = 0
    rates = []
    infos = []
    for tick in range(n_ticks):
        tick_seed = (seed * 100003 + tick) & 0x7FFFFFFF
        out = planner(cur, tick_seed)
        traj = out.trajectory
        rates.append(coupling_violations(traj, 0).rate)
        infos.append(out.info)

        pose = cur.ego
        heading = math.atan2(pose[3], pose[2])
        pts = ego_to_world(pose, traj.data[0, :n_exec, :2])
        angles = np.arctan2(traj.data[0, :n_exec, 3], traj.data[0, :n_exec, 2]) + heading
        for i in range(n_exec):
            t_abs = elapsed + (i + 1) * TIME_STEP
            executed.append((pts[i, 0], pts[i, 1], math.cos(angles[i]), math.sin(angles[i])))
            times.append(t_abs)
            obs, radii = _neighbor_world_at(scene, center, t_abs)
            if obs.shape[0]:
                d = np.hypot(obs[:, 0] - pts[i, 0], obs[:, 1] - pts[i, 1])
                if np.any(d < radii + EGO_RADIUS):
                    collision = True
                    break
            _, _, lat, _ = match_centerline(center, pts[i : i + 1])
            if lat[0] <= center.half_width:
                inside += 1
            else:
                out_flag = True
        if collision:
            break
        elapsed += replan_interval_s
        last = executed[-1]
        if len(executed) >= 2:
            prev = executed[-2]
            v_new = math.hypot(last[0] - prev[0], last[1] - prev[1]) / TIME_STEP
        else:
            v_new = pose[4]
        cur = advance_scene(scene, (last[0], last[1], last[2], last[3], v_new), elapsed)

    executed_arr = np.asarray(executed).reshape(-1, 4)
    times_arr = np.asarray(times)

    stalled = False
    win = int(round(STALL_WINDOW_S / TIME_STEP))
    if executed_arr.shape[0] > win:
        p = executed_arr[:, :2]
        gaps = np.linalg.norm(p[win:] - p[:-win], axis=1)
        stalled = bool(np.any(gaps < STALL_DISTANCE))

    end_s = start_s
    if executed_arr.shape[0]:
        _, s_end, _, _ = match_centerline(center, executed_arr[-1:, :2])
        end_s = float(s_end[0])
    frac = inside / max(len(executed), 1)
    return RolloutResult(executed=executed_arr, times=times_arr, collision=collision,
                         out_of_corridor=out_flag, stalled=stalled,
                         corridor_fraction=frac, start_s=start_s, end_s=end_s,
                         plan_violation_rates=rates, plan_infos=infos,
                         wall_time=time.perf_counter() - t_start)


@dataclass(frozen=True)
class ScoreBreakdown:
    total: float
    no_collision: float
    corridor: float
    progress: float
    comfort: float
    coupling_ok: float


def score(result: RolloutResult, scene: SceneContext) -> ScoreBreakdown:
    """100 * no_collision * (0.4 corridor + 0.2 progress + 0.2 comfort
    + 0.2 coupling_ok); every component sits in [0, 1]."""
    center = build_road(scene.road)
    remaining = max(center.s[-1] - result.start_s, 1e-9)
    progress = min(1.0, max(0.0, (result.end_s - result.start_s) / remaining))

    comfort = 1.0
    coupling_ok = 1.0
    if result.executed.shape[0] >= 3:
        traj = Trajectory(data=result.executed[None, :, :], dt=TIME_STEP)
        prof = kinematics(traj, 0)
        ok = (np.abs(prof.a_y) <= COMFORT_AY) & (np.abs(prof.j_lat) <= COMFORT_JERK)
        comfort = float(ok.mean())
        coupling_ok = 1.0 - coupling_violations(traj, 0).rate
    no_col = 0.0 if result.collision else 1.0
    total = 100.0 * no_col * (0.4 * result.corridor_fraction + 0.2 * progress
                              + 0.2 * comfort + 0.2 * coupling_ok)
    return ScoreBreakdown(total=total, no_collision=no_col,
                          corridor=result.corridor_fraction, progress=progress,
                          comfort=comfort, coupling_ok=coupling_ok)


@dataclass
class SuiteRow:
    planner: str
    kind: str
    seed: int
    score: float
    corridor: float
    progress: float
    comfort: float
    coupling_ok: float
    plan_violation_rate: float
    executed_violation_rate: float
    triggered_steps: int
    collision: bool
    out_of_corridor: bool
    stalled: bool


def evaluate_pair(planners: dict, scene: SceneContext, pair_seed: int,
                  replan_interval_s: float = 1.0, horizon_s: float = 15.0) -> list:
    """One scenario through every planner with identical tick seeds."""
    rows = []
    for name, planner in planners.items():
        rr = rollout(planner, scene, seed=pair_seed,
                     replan_interval_s=replan_interval_s, horizon_s=horizon_s)
        sb = score(rr, scene)
        exec_rate = 0.0
        if rr.executed.shape[0] >= 3:
            exec_rate = coupling_violations(
                Trajectory(data=rr.executed[None, :, :], dt=TIME_STEP), 0).rate
        triggered = sum(i.triggered_steps for i in rr.plan_infos if i is not None)
        rows.append(SuiteRow(planner=name, kind=scene.kind, seed=scene.seed,
                             score=sb.total, corridor=sb.corridor,
                             progress=sb.progress, comfort=sb.comfort,
                             coupling_ok=sb.coupling_ok,
                             plan_violation_rate=float(np.mean(rr.plan_violation_rates)),
                             executed_violation_rate=exec_rate,
                             triggered_steps=triggered,
                             collision=rr.collision,
                             out_of_corridor=rr.out_of_corridor,
                             stalled=rr.stalled))
    return rows


@dataclass
class SuiteResult:
    rows: list
    summary: dict   # planner -> aggregate means


def compare_suite(planners: dict, scenes: list, seed: int = 0,
                  replan_interval_s: float = 1.0, horizon_s: float = 15.0,
                  min_scenarios: int = 20) -> SuiteResult:
    """Paired comparison: every planner sees the same scenarios and the
    same per-tick sampling seeds."""
    if len(planners) < 2:
        raise ValueError("compare_suite needs at least two planners")
    if len(scenes) < min_scenarios:
        raise ValueError(f"compare_suite needs at least {min_scenarios} scenarios")
    rows = []
    for i, scene in enumerate(scenes):
        rows.extend(evaluate_pair(planners, scene, pair_seed=seed + i,
                                  replan_interval_s=replan_interval_s,
                                  horizon_s=horizon_s))
    return SuiteResult(rows=rows, summary=summarize(rows))


def summarize(rows: list) -> dict:
    out = {}
    for name in {r.planner for r in rows}:
        sub = [r for r in rows if r.planner == name]
        out[name] = {
            "mean_score": float(np.mean([r.score for r in sub])),
            "mean_plan_violation_rate": float(np.mean([r.plan_violation_rate for r in sub])),
            "mean_executed_violation_rate": float(np.mean([r.executed_violation_rate for r in sub])),
            "total_triggered_steps": int(sum(r.triggered_steps for r in sub)),
            "collisions": int(sum(r.collision for r in sub)),
            "scenarios": len(sub),
        }
    return out


def bench_latency(planner, scene: SceneContext, repetitions: int = 100,
                  warmup: int = 3) -> dict:
    """Wall-clock per reverse step and per plan; warmup runs are discarded."""
    if repetitions < 10:
        raise ValueError("bench_latency needs at least 10 repetitions")
    for w in range(warmup):
        planner(scene, seed=w)
    step_times = []
    e2e = []
    for rep in range(repetitions):
        t0 = time.perf_counter()
        out = planner(scene, seed=1000 + rep)
        e2e.append(time.perf_counter() - t0)
        if out.info is None or not out.info.step_times:
            raise ValueError("bench_latency needs a planner that reports step times")
        step_times.extend(out.info.step_times)
    st = np.asarray(step_times) * 1e3
    return {
        "per_step_mean_ms": float(st.mean()),
        "per_step_p95_ms": float(np.percentile(st, 95)),
        "e2e_mean_ms": float(np.mean(e2e) * 1e3),
        "steps_per_plan": len(step_times) // repetitions,
        "repetitions": repetitions,
    }
