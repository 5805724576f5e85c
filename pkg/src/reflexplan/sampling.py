"""Reverse-diffusion planning loop with optional reflection.

Sampling walks a strided subsequence of the training schedule, largest
timestep first.  After each step the clean estimate from that step's noise
prediction is scored; if reflection is enabled and the confidence falls
below the threshold (and t >= 2), the step is retried through the
reflection loop.  Per-step predictor calls stay within 2 + 4 * r_max.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .confidence import ConfidenceContext, evaluate, trace_row
from .diffusion import (
    DEFAULT_SAMPLE_STEPS,
    NoiseSchedule,
    cfg_noise,
    ddim_step,
    ddpm_step,
    predict_x0,
    strided_timesteps,
)
from .reflection import ReflectionConfig, reflection_loop
from .trajectory import (
    AGENT_ROWS,
    HORIZON_STEPS,
    TIME_STEP,
    Trajectory,
    decode_state,
    normalize_headings,
)

_U32 = 0xFFFFFFFF


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim_cfg"      # ddim_cfg | ddpm_cfg
    lambda1: float = 0.9
    steps: int = DEFAULT_SAMPLE_STEPS
    seed: int = 0
    state_shape: tuple = (AGENT_ROWS, HORIZON_STEPS, 4)
    dt: float = TIME_STEP

    def validate(self) -> None:
        if self.kind not in ("ddim_cfg", "ddpm_cfg"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class TriggerEvent:
    t: int
    attempts: int
    entry_c: float
    exit_c: float


@dataclass
class SampleResult:
    trajectory: Trajectory
    trace: list = field(default_factory=list)        # TraceRow sequence
    triggers: list = field(default_factory=list)     # TriggerEvent per reflected step
    step_times: list = field(default_factory=list)   # wall seconds per reverse step
    predictor_calls: int = 0
    budget: int = 0                                  # per-step call ceiling
    final_confidence: float | None = None
    warnings: list = field(default_factory=list)

    @property
    def triggered_steps(self) -> int:
        return len(self.triggers)


def sample(predictor, cond, schedule: NoiseSchedule, sampler: SamplerConfig,
           reflection: ReflectionConfig | None = None,
           confidence_ctx: ConfidenceContext | None = None,
           trace: bool = True) -> SampleResult:
    """Draw one joint trajectory.

    Deterministic given (predictor, cond, seed, schedule) for ddim_cfg;
    reflection requires a confidence context.
    """
    sampler.validate()
    if reflection is not None:
        reflection.validate()
        if confidence_ctx is None:
            raise ValueError("reflection needs a confidence context")

    ts = strided_timesteps(schedule.T, sampler.steps)
    sub = schedule.subsequence(ts)
    rng = np.random.default_rng([sampler.seed & _U32])
    x = rng.standard_normal(sampler.state_shape)

    result = SampleResult(trajectory=None,  # filled at the end
                          budget=2 + 4 * (reflection.r_max if reflection else 0))
    for j in range(sub.T, 0, -1):
        t_embed = int(sub.timesteps[j - 1])
        t0 = time.perf_counter()
        calls_before = result.predictor_calls

        eps_hat = cfg_noise(predictor, x, t_embed, cond, sampler.lambda1)
        result.predictor_calls += 2
        report = None
        clean = None
        if confidence_ctx is not None:
            x0_hat = predict_x0(sub, x, eps_hat, j)
            clean = normalize_headings(decode_state(x0_hat, sampler.dt))
            report = evaluate(confidence_ctx, clean)
            if trace:
                result.trace.append(trace_row(t_embed, "normal", report))

        if sampler.kind == "ddpm_cfg":
            z = rng.standard_normal(sampler.state_shape) if t_embed > 1 else None
            x = ddpm_step(sub, x, eps_hat, j, z)
        else:
            x = ddim_step(sub, x, eps_hat, j)

        if (reflection is not None and t_embed >= 2
                and report is not None and report.c < reflection.gamma):
            loop = reflection_loop(predictor, x, j, t_embed, sub, cond,
                                   reflection, sampler.lambda1, confidence_ctx,
                                   report, clean, sampler.dt, trace=trace)
            result.predictor_calls += loop.predictor_calls
            if loop.aborted:
                result.warnings.append(f"reflection aborted at t={t_embed}: non-finite state")
            else:
                x = loop.x
            result.triggers.append(TriggerEvent(t=t_embed, attempts=loop.attempts,
                                                entry_c=loop.entry_c, exit_c=loop.exit_c))
            if trace:
                result.trace.extend(loop.rows)

        step_calls = result.predictor_calls - calls_before
        if step_calls > result.budget:
            result.warnings.append(f"call budget exceeded at t={t_embed}: {step_calls}")
        result.step_times.append(time.perf_counter() - t0)

    traj = normalize_headings(decode_state(x, sampler.dt))
    result.trajectory = traj
    if confidence_ctx is not None:
        final = evaluate(confidence_ctx, traj)
        result.final_confidence = final.c
        if trace:
            result.trace.append(trace_row(0, "normal", final))
    return result
