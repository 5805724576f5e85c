"""Confidence-gated reflective denoising.

When a reverse step lands with low confidence, the sampler climbs back up
one noise level and retries: a decoupled conditioning gradient is projected
through a per-step physics weighting (curvature-speed coupling on the ego
position channels), injected while re-noising, and the step is re-denoised
under full guidance.  With a constant noise estimate, the identity
projection and the matched injection scale, one cycle is an exact no-op,
so reflection only ever moves the sample where the model disagrees with
itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .confidence import ConfidenceContext, ConfidenceReport, evaluate, trace_row
from .diffusion import NoiseSchedule, cfg_combine, cfg_noise, ddim_step, predict_x0
from .trajectory import Trajectory, decode_state, kinematics, normalize_headings


@dataclass(frozen=True)
class ReflectionConfig:
    gamma: float = 0.8        # confidence threshold that triggers a cycle
    lambda2: float = 0.0      # decoupled-gradient guidance weight
    r_max: int = 2            # attempts per sampling step
    b_mode: str = "match_ddim"  # injection scale: reuse c_t, or a constant
    b_const: float = 0.05
    projection: str = "physics"  # physics | identity

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")
        if self.b_mode not in ("match_ddim", "constant"):
            raise ValueError(f"unknown b_mode {self.b_mode!r}")
        if self.projection not in ("physics", "identity"):
            raise ValueError(f"unknown projection {self.projection!r}")


def condition_gradient(predictor, x: np.ndarray, t: int, cond,
                       lambda2: float) -> np.ndarray:
    """Decoupling direction eps_dec + lambda2 (eps_full - eps_dec).

    Evaluated at the already-denoised state but with the timestep index of
    the step just taken; exactly two predictor calls.
    """
    return cfg_combine(predictor, x, t, cond, lambda2)


def project_onto_manifold(delta: np.ndarray, clean: Trajectory,
                          mode: str = "physics") -> np.ndarray:
    """Reweight the ego position components of `delta` by the local
    curvature-speed coupling of the clean trajectory estimate:

        lat' = (v^2 lat + 2 k v lon) / (1 + v^2 + 2 |k v|),  lon' = lon

    Heading channels, neighbour rows and degenerate steps pass through
    untouched.  mode="identity" returns the input unchanged.
    """
    if mode == "identity":
        return delta
    if mode != "physics":
        raise ValueError(f"unknown projection mode {mode!r}")
    prof = kinematics(clean, 0)
    out = delta.copy()
    d = delta[0, :, :2]
    u = prof.tangent
    nrm = np.column_stack([-u[:, 1], u[:, 0]])
    lon = (d * u).sum(axis=1)
    lat = (d * nrm).sum(axis=1)
    v = prof.v
    kv = prof.kappa * v
    denom = 1.0 + v * v + 2.0 * np.abs(kv)
    lat2 = (v * v * lat + 2.0 * kv * lon) / denom
    proj = lon[:, None] * u + lat2[:, None] * nrm
    keep = prof.degenerate
    proj[keep] = d[keep]
    out[0, :, :2] = proj
    return out


def renoise(schedule: NoiseSchedule, x_prev: np.ndarray, eps_hat: np.ndarray,
            t: int, b: float | None = None) -> np.ndarray:
    """Climb one level: x_t' = sqrt(alpha_t) x_{t-1} + b * eps_hat.

    With b left at the deterministic-step coefficient c_t, renoise followed
    by ddim_step under the same noise estimate is the identity.
    """
    schedule.check(t)
    if b is None:
        b = schedule.ddim_coeff(t)
    return np.sqrt(schedule.alpha[t - 1]) * x_prev + b * eps_hat


@dataclass
class ReflectOutcome:
    x: np.ndarray                 # re-denoised state (input if aborted)
    x0_injected: np.ndarray       # clean estimate implied by the injection
    x0_denoised: np.ndarray       # clean estimate after re-denoising
    ok: bool
    predictor_calls: int


def reflect_once(predictor, x_prev: np.ndarray, t_sched: int, t_embed: int,
                 schedule: NoiseSchedule, cond, cfg: ReflectionConfig,
                 lambda1: float, clean: Trajectory) -> ReflectOutcome:
    """One renoise / inject / re-denoise cycle at schedule position t_sched.

    `t_embed` is the original timestep the denoiser embeds (they differ on
    strided schedules).  `clean` is the current clean-trajectory estimate
    used by the physics projection.  Any non-finite intermediate aborts the
    cycle and returns the input unchanged.
    """
    delta = condition_gradient(predictor, x_prev, t_embed, cond, cfg.lambda2)
    delta = project_onto_manifold(delta, clean, cfg.projection)
    b = schedule.ddim_coeff(t_sched) if cfg.b_mode == "match_ddim" else cfg.b_const
    x_inj = renoise(schedule, x_prev, delta, t_sched, b=b)
    if not np.all(np.isfinite(x_inj)):
        return ReflectOutcome(x=x_prev, x0_injected=x_prev, x0_denoised=x_prev,
                              ok=False, predictor_calls=2)
    eps_new = cfg_noise(predictor, x_inj, t_embed, cond, lambda1)
    x_new = ddim_step(schedule, x_inj, eps_new, t_sched)
    if not np.all(np.isfinite(x_new)):
        return ReflectOutcome(x=x_prev, x0_injected=x_prev, x0_denoised=x_prev,
                              ok=False, predictor_calls=4)
    return ReflectOutcome(x=x_new,
                          x0_injected=predict_x0(schedule, x_inj, delta, t_sched),
                          x0_denoised=predict_x0(schedule, x_inj, eps_new, t_sched),
                          ok=True, predictor_calls=4)


@dataclass
class LoopResult:
    x: np.ndarray
    attempts: int
    entry_c: float
    exit_c: float
    predictor_calls: int
    aborted: bool
    clean: Trajectory             # clean estimate after the last attempt
    rows: list                    # TraceRow per phase, when tracing


def _decoded(x0_state: np.ndarray, dt: float) -> Trajectory:
    return normalize_headings(decode_state(x0_state, dt))


def reflection_loop(predictor, x_prev: np.ndarray, t_sched: int, t_embed: int,
                    schedule: NoiseSchedule, cond, cfg: ReflectionConfig,
                    lambda1: float, ctx: ConfidenceContext,
                    entry: ConfidenceReport, clean: Trajectory,
                    dt: float, trace: bool = True) -> LoopResult:
    """Retry low-confidence steps, at most r_max times.

    The entry confidence comes from the sampling step itself, so the gate
    costs no extra predictor calls; each attempt adds exactly four.
    """
    cfg.validate()
    rows: list = []
    c_cur = entry.c
    x = x_prev
    attempts = 0
    calls = 0
    aborted = False
    while attempts < cfg.r_max and c_cur < cfg.gamma:
        out = reflect_once(predictor, x, t_sched, t_embed, schedule, cond,
                           cfg, lambda1, clean)
        attempts += 1
        calls += out.predictor_calls
        if not out.ok:
            aborted = True
            break
        x = out.x
        clean = _decoded(out.x0_denoised, dt)
        if trace:
            inj = evaluate(ctx, _decoded(out.x0_injected, dt))
            rows.append(trace_row(t_embed, "reflect", inj))
            rep = evaluate(ctx, clean)
            rows.append(trace_row(t_embed, "reflect-denoise", rep))
            c_cur = rep.c
        elif attempts < cfg.r_max:
            c_cur = evaluate(ctx, clean).c
    return LoopResult(x=x, attempts=attempts, entry_c=entry.c, exit_c=c_cur,
                      predictor_calls=calls, aborted=aborted, clean=clean,
                      rows=rows)
