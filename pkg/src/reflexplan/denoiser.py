"""Noise-prediction MLP with hand-written reverse-mode gradients.

The learned part of the network is a clean-state estimate, not the noise
itself.  Sinusoidal time features and the condition vector are projected
to d_model, summed with a projection of the flattened state, and passed
through two tanh hidden layers; the head emits per-agent spline-like
coefficients over a fixed low-frequency cosine basis along the step axis.
A rank-limited linear condition skip (c @ A, gated per-channel by time
features) feeds the same coefficients: the map from route geometry to the
clean state is nearly linear, and a deep trunk alone learns it too slowly
to anchor the first reverse steps.  The clean estimate is the in-band
part of the input state plus a learned correction,

    x0_hat = x_lf + expand(head)

and the noise estimate follows from the forward-noising identity
eps = (x - sqrt(ab) x0) / sqrt(1 - ab) rather than from learned weights:

    eps_hat = (x - x_lf) / sqrt(1 - ab)              out-of-band noise,
                                                     closed form
            + (1 - sqrt(ab)) / sqrt(1 - ab) * x_lf   closed form, <= 1
            + u(t) * x_lf                            learned readback trim
            - q(t) * expand(head)                    learned correction

with q(t) = min(sqrt(ab) / sqrt(1 - ab), HEAD_GAIN_CAP).  The raw gain
sqrt(ab)/sqrt(1-ab) reaches 1e2 near t = 1; an eps-space MSE is then an
x0 regression with 1e4 curvature on the head weights, which momentum
descent at any single learning rate cannot survive.  Clamping the gain
keeps the curvature bounded while leaving the optimum intact: below the
clamp the best correction is exactly x0 - x_lf, above it
(gain / cap) * (x0 - x_lf), which stays O(1) because gain * (x0 - x_lf)
collapses to bounded terms.  Clean trajectories carry almost no energy
above the basis band, so the closed-form first term strips injected noise
outside the band exactly, and a head that has learned the correction
strips the in-band component the same way; neither cancellation asks a
bounded learned map to chase a schedule factor.  At zero weights u and
the head vanish, leaving eps_hat = (x - sqrt(ab) x_lf) / sqrt(1 - ab).
This is the one place the network needs schedule values, so the alpha-bar
table is bound into the parameters at init.

Gate parameters are scaled so their loss curvature matches the dense blocks
(the fan-in rule applied to the skips: a gate channel that multiplies n
output entries is scaled by 1/sqrt(n)); one learning rate then serves the
whole model.

All math runs in float64; parameters are kept float32-representable so a
checkpoint round trip is bit-exact.
"""
from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
    DEFAULT_T,
    NoiseSchedule,
    make_schedule,
)

TIME_FEATURES = 32
COND_SKIP_RANK = 48
SMOOTH_BASIS = 20  # cosine modes per channel; 20 over an 8 s horizon ~ 1.2 Hz
# lr * cap^2 * mean(H2^2) * 2 * (1+m)/(1-m) must stay under 2 for the
# default lr = 1e-3, m = 0.9; 8 leaves a 3x margin
HEAD_GAIN_CAP = 8.0

PARAM_ORDER = ("w_state", "w_cond", "w_time", "b_in",
               "w_h1", "b_h1", "w_h2", "b_h2",
               "w_out", "b_out", "w_gate", "b_gate",
               "w_cs_in", "w_cs_out", "w_cgate", "b_cgate")

CHECKPOINT_VERSION = 1


@functools.lru_cache(maxsize=8)
def smooth_basis(n_steps: int, n_basis: int) -> np.ndarray:
    """Orthonormal low-frequency cosine basis, shape (n_basis, n_steps)."""
    if not 1 <= n_basis <= n_steps:
        raise ValueError(f"need 1 <= n_basis <= n_steps, got {n_basis}, {n_steps}")
    j = np.arange(n_basis)[:, None]
    k = np.arange(n_steps)[None, :]
    basis = np.cos(np.pi * j * (k + 0.5) / n_steps)
    basis *= np.where(j == 0, math.sqrt(1.0 / n_steps), math.sqrt(2.0 / n_steps))
    basis.flags.writeable = False
    return basis


def time_features(t, n: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of the (integer) timestep; t may be an array."""
    t = np.asarray(t, dtype=np.float64)
    half = n // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _f32(a: np.ndarray) -> np.ndarray:
    # float64 values that survive a float32 checkpoint bit-for-bit
    return a.astype(np.float32).astype(np.float64)


@dataclass
class DenoiserParams:
    weights: dict
    d_model: int
    state_dim: int
    cond_dim: int
    seed: int
    n_steps: int = 80
    schedule: tuple = (DEFAULT_T, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    step: int = 0

    def __post_init__(self):
        T, bmin, bmax = self.schedule
        self.alpha_bar = make_schedule(int(T), float(bmin), float(bmax)).alpha_bar

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    @property
    def n_basis(self) -> int:
        return min(SMOOTH_BASIS, self.n_steps)

    @property
    def smooth_dim(self) -> int:
        # head width in coefficient space: rows * channels * n_basis
        return (self.state_dim // self.n_steps) * self.n_basis


def init_params(seed: int, d_model: int, state_dim: int, cond_dim: int,
                n_steps: int = 80,
                schedule: tuple = (DEFAULT_T, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX),
                ) -> DenoiserParams:
    """Variance-scaled Gaussian init, gate and output bias at zero."""
    if state_dim % (4 * n_steps) != 0:
        raise ValueError(f"state_dim {state_dim} is not rows x {n_steps} x 4")
    rng = np.random.default_rng(seed)
    d = d_model

    def dense(n_in, n_out):
        return _f32(rng.standard_normal((n_in, n_out)) / math.sqrt(n_in))

    r = COND_SKIP_RANK
    m = (state_dim // n_steps) * min(SMOOTH_BASIS, n_steps)
    weights = {
        "w_state": dense(state_dim, d),
        "w_cond": dense(cond_dim, d),
        "w_time": dense(TIME_FEATURES, d),
        "b_in": np.zeros(d),
        "w_h1": dense(d, d),
        "b_h1": np.zeros(d),
        "w_h2": dense(d, d),
        "b_h2": np.zeros(d),
        "w_out": dense(d, m),
        "b_out": np.zeros(m),
        "w_gate": np.zeros(TIME_FEATURES),
        "b_gate": np.zeros(()),
        "w_cs_in": dense(cond_dim, r),
        "w_cs_out": dense(r, m),
        "w_cgate": np.zeros((TIME_FEATURES, r)),
        "b_cgate": np.zeros(r),
    }
    return DenoiserParams(weights=weights, d_model=d, state_dim=state_dim,
                          cond_dim=cond_dim, seed=seed, n_steps=n_steps,
                          schedule=tuple(schedule))


def _expand(params: DenoiserParams, coeffs: np.ndarray) -> np.ndarray:
    """Coefficient-space head output (B, smooth_dim) -> state space (B, state_dim)."""
    basis = smooth_basis(params.n_steps, params.n_basis)
    rows = params.state_dim // (params.n_steps * 4)
    a = coeffs.reshape(coeffs.shape[0], rows, params.n_basis, 4)
    return np.einsum("brjc,js->brsc", a, basis).reshape(coeffs.shape[0], -1)


def _expand_T(params: DenoiserParams, d_state: np.ndarray) -> np.ndarray:
    """Adjoint of _expand: state-space cotangent -> coefficient space."""
    basis = smooth_basis(params.n_steps, params.n_basis)
    rows = params.state_dim // (params.n_steps * 4)
    g = d_state.reshape(d_state.shape[0], rows, params.n_steps, 4)
    return np.einsum("brsc,js->brjc", g, basis).reshape(d_state.shape[0], -1)


def _forward_batch(params: DenoiserParams, X: np.ndarray, t: np.ndarray,
                   C: np.ndarray, keep: bool = False):
    w = params.weights
    t = np.asarray(t, dtype=np.int64)
    if np.any((t < 1) | (t > params.alpha_bar.size)):
        raise ValueError(f"timestep outside [1, {params.alpha_bar.size}]")
    # gate curvature balancing: a state-gate unit multiplies state_dim
    # entries, a condition-gate channel feeds a w_cs_out row carrying
    # state_dim / rank energy
    g_scale = 1.0 / math.sqrt(params.state_dim)
    cg_scale = math.sqrt(COND_SKIP_RANK / params.state_dim)
    Temb = time_features(t)
    Z0 = X @ w["w_state"] + C @ w["w_cond"] + Temb @ w["w_time"] + w["b_in"]
    H0 = np.tanh(Z0)
    H1 = np.tanh(H0 @ w["w_h1"] + w["b_h1"])
    H2 = np.tanh(H1 @ w["w_h2"] + w["b_h2"])
    u = (Temb @ w["w_gate"] + w["b_gate"]) * g_scale
    S1 = C @ w["w_cs_in"]
    G = (Temb @ w["w_cgate"] + w["b_cgate"]) * cg_scale
    M = S1 * G
    head = H2 @ w["w_out"] + w["b_out"] + M @ w["w_cs_out"]
    Xlf = _expand(params, _expand_T(params, X))     # in-band part of the state
    ab = params.alpha_bar[t - 1]
    sa = np.sqrt(ab)
    inv = 1.0 / np.sqrt(1.0 - ab)
    q = np.minimum(sa * inv, HEAD_GAIN_CAP)
    # closed-form noising algebra plus two bounded learned in-band paths
    out = inv[:, None] * (X - Xlf) + ((1.0 - sa) * inv + u)[:, None] * Xlf \
        - q[:, None] * _expand(params, head)
    if keep:
        return out, (X, Xlf, C, Temb, H0, H1, H2, S1, G, M, q)
    return out


def forward(params: DenoiserParams, x_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
    """Noise estimate for a single state; shape is preserved."""
    x_t = np.asarray(x_t, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("non-finite values in x_t")
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite values in condition vector")
    if x_t.size != params.state_dim:
        raise ValueError(f"state size {x_t.size} != {params.state_dim}")
    if c.size != params.cond_dim:
        raise ValueError(f"condition size {c.size} != {params.cond_dim}")
    out = _forward_batch(params, x_t.reshape(1, -1), np.asarray([t]), c.reshape(1, -1))
    return out.reshape(x_t.shape)


def as_predictor(params: DenoiserParams):
    """Callable (x, t, c) -> eps_hat closing over fixed parameters."""
    def predict(x, t, c):
        return forward(params, x, t, c)
    return predict


@dataclass
class TrainBatch:
    x: np.ndarray     # (B, state_dim) noised network inputs
    cond: np.ndarray  # (B, cond_dim)
    t: np.ndarray     # (B,) int
    eps: np.ndarray   # (B, state_dim) noise targets


def loss_and_grads(params: DenoiserParams, batch: TrainBatch):
    """Squared-norm noise-prediction error, averaged over the batch."""
    w = params.weights
    X = batch.x
    B = X.shape[0]
    eps_hat, (Xc, Xlf, C, Temb, H0, H1, H2, S1, G, M, sa) = _forward_batch(
        params, X, batch.t, batch.cond, keep=True)
    resid = eps_hat - batch.eps
    loss = float((resid * resid).sum() / B)

    dOut = (2.0 / B) * resid
    # the head enters through -sa expand(.), the readback gate through u x_lf
    dCoeff = -_expand_T(params, sa[:, None] * dOut)
    grads = {}
    grads["w_out"] = H2.T @ dCoeff
    grads["b_out"] = dCoeff.sum(axis=0)
    dGate = (dOut * Xlf).sum(axis=1) / math.sqrt(params.state_dim)
    grads["w_gate"] = Temb.T @ dGate
    grads["b_gate"] = np.asarray(dGate.sum())
    grads["w_cs_out"] = M.T @ dCoeff
    dM = dCoeff @ w["w_cs_out"].T
    dG = (dM * S1) * math.sqrt(COND_SKIP_RANK / params.state_dim)
    grads["w_cgate"] = Temb.T @ dG
    grads["b_cgate"] = dG.sum(axis=0)
    grads["w_cs_in"] = C.T @ (dM * G)
    dH2 = dCoeff @ w["w_out"].T
    dZ2 = dH2 * (1.0 - H2 * H2)
    grads["w_h2"] = H1.T @ dZ2
    grads["b_h2"] = dZ2.sum(axis=0)
    dH1 = dZ2 @ w["w_h2"].T
    dZ1 = dH1 * (1.0 - H1 * H1)
    grads["w_h1"] = H0.T @ dZ1
    grads["b_h1"] = dZ1.sum(axis=0)
    dH0 = dZ1 @ w["w_h1"].T
    dZ0 = dH0 * (1.0 - H0 * H0)
    grads["w_state"] = Xc.T @ dZ0
    grads["w_cond"] = C.T @ dZ0
    grads["w_time"] = Temb.T @ dZ0
    grads["b_in"] = dZ0.sum(axis=0)
    return loss, grads


def make_training_batch(params: DenoiserParams, schedule: NoiseSchedule,
                        x0: np.ndarray, c_full: np.ndarray, c_dec: np.ndarray,
                        p_drop: float, batch_size: int,
                        rng: np.random.Generator) -> tuple[TrainBatch, int]:
    """Noised batch with conditioning dropout; returns the dropped count."""
    n = x0.shape[0]
    idx = rng.integers(0, n, batch_size)
    t = rng.integers(1, schedule.T + 1, batch_size)
    eps = rng.standard_normal((batch_size, params.state_dim))
    drop = rng.random(batch_size) < p_drop
    cond = np.where(drop[:, None], c_dec[idx], c_full[idx])
    ab = schedule.alpha_bar[t - 1][:, None]
    x_t = np.sqrt(ab) * x0[idx] + np.sqrt(1.0 - ab) * eps
    return TrainBatch(x=x_t, cond=cond, t=t, eps=eps), int(drop.sum())


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    p_drop: float = 0.1
    seed: int = 0
    d_model: int = 128
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.06
    n_steps: int = 80


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: np.ndarray
    decoupled_draws: int
    schedule: NoiseSchedule
    momentum: dict


def train(x0: np.ndarray, c_full: np.ndarray, c_dec: np.ndarray,
          cfg: TrainConfig, params: DenoiserParams | None = None,
          momentum_state: dict | None = None,
          start_step: int = 0, stop_step: int | None = None) -> TrainResult:
    """Momentum descent with cosine learning-rate decay.

    Batches are drawn from a per-step seeded stream and the decay horizon is
    cfg.steps regardless of [start_step, stop_step), so a run stopped at k
    and resumed from its params and momentum reproduces the remaining loss
    curve of the uninterrupted run exactly.
    """
    if x0.ndim != 2 or c_full.shape != c_dec.shape or c_full.shape[0] != x0.shape[0]:
        raise ValueError("training arrays disagree on sample count")
    stop = cfg.steps if stop_step is None else stop_step
    if not 0 <= start_step <= stop <= cfg.steps:
        raise ValueError(f"need 0 <= start_step <= stop_step <= steps, "
                         f"got {start_step}, {stop}, {cfg.steps}")
    schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    if params is None:
        params = init_params(cfg.seed, cfg.d_model, x0.shape[1], c_full.shape[1],
                             n_steps=cfg.n_steps,
                             schedule=(cfg.T, cfg.beta_min, cfg.beta_max))
    mom = momentum_state or {k: np.zeros_like(v) for k, v in params.weights.items()}

    losses = np.empty(stop - start_step)
    initial = None
    dropped = 0
    for k in range(start_step, stop):
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, k])
        batch, d = make_training_batch(params, schedule, x0, c_full, c_dec,
                                       cfg.p_drop, cfg.batch_size, rng)
        dropped += d
        loss, grads = loss_and_grads(params, batch)
        if initial is None:
            initial = loss
        if not math.isfinite(loss) or loss > 1e3 * max(initial, 1e-9):
            raise RuntimeError(
                f"training diverged at step {k}: loss {loss:.3e} vs initial {initial:.3e}")
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * k / max(cfg.steps - 1, 1)))
        for name in PARAM_ORDER:
            mom[name] = _f32(cfg.momentum * mom[name] + grads[name])
            params.weights[name] = _f32(params.weights[name] - lr * mom[name])
        losses[k - start_step] = loss
    params.step = stop
    return TrainResult(params=params, losses=losses, decoupled_draws=dropped,
                       schedule=schedule, momentum=mom)


# --------------------------------------------------------------------------
# Gradient verification


def finite_difference_probe(params: DenoiserParams, batch: TrainBatch,
                            grads: dict, entries: list, h: float = 1e-4) -> list:
    """Central-difference check of given gradients at specific entries.

    Returns (name, index, analytic, numeric, rel_error) tuples.
    """
    report = []
    for name, idx in entries:
        w = params.weights[name]
        orig = w.flat[idx] if w.ndim else float(w)
        def set_val(v):
            if w.ndim:
                w.flat[idx] = v
            else:
                params.weights[name] = np.asarray(v)
        set_val(orig + h)
        lp, _ = loss_and_grads(params, batch)
        set_val(orig - h)
        lm, _ = loss_and_grads(params, batch)
        set_val(orig)
        if not w.ndim:
            params.weights[name] = np.asarray(orig)
        numeric = (lp - lm) / (2.0 * h)
        g = grads[name]
        analytic = g.flat[idx] if g.ndim else float(g)
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        report.append((name, idx, analytic, numeric, rel))
    return report


def grad_check(params: DenoiserParams, n_probes: int = 50, seed: int = 0,
               batch_size: int = 4, h: float = 1e-4):
    """Probe random parameter entries against central differences."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((batch_size, params.state_dim))
    cond = rng.standard_normal((batch_size, params.cond_dim))
    t = rng.integers(1, 50, batch_size)
    eps = rng.standard_normal((batch_size, params.state_dim))
    batch = TrainBatch(x=x0, cond=cond, t=t, eps=eps)
    _, grads = loss_and_grads(params, batch)

    names = list(PARAM_ORDER)
    entries = []
    for _ in range(n_probes):
        name = names[rng.integers(0, len(names))]
        size = max(params.weights[name].size, 1)
        entries.append((name, int(rng.integers(0, size))))
    report = finite_difference_probe(params, batch, grads, entries, h)
    max_rel = max(r[4] for r in report)
    return max_rel, report


# --------------------------------------------------------------------------
# Checkpoints: one JSON header line, then a flat little-endian float32 payload.


def _shapes(params: DenoiserParams) -> dict:
    return {k: list(params.weights[k].shape) for k in PARAM_ORDER}


def save_checkpoint(path, params: DenoiserParams, momentum: dict | None = None,
                    meta: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "d_model": params.d_model,
        "state_dim": params.state_dim,
        "cond_dim": params.cond_dim,
        "seed": params.seed,
        "n_steps": params.n_steps,
        "schedule": list(params.schedule),
        "step": params.step,
        "shapes": _shapes(params),
        "has_momentum": momentum is not None,
        "meta": meta or {},
    }
    blobs = [params.weights[k].astype("<f4").tobytes() for k in PARAM_ORDER]
    if momentum is not None:
        blobs += [momentum[k].astype("<f4").tobytes() for k in PARAM_ORDER]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (params, momentum-or-None).  Validates header and payload."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    shapes = header["shapes"]
    expected = sum(int(np.prod(shapes[k])) if shapes[k] else 1 for k in PARAM_ORDER)
    copies = 2 if header["has_momentum"] else 1
    if len(payload) != expected * 4 * copies:
        raise ValueError(f"checkpoint payload is {len(payload)} bytes, "
                         f"expected {expected * 4 * copies}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)

    def take(offset):
        out = {}
        pos = offset
        for k in PARAM_ORDER:
            shape = tuple(shapes[k])
            n = int(np.prod(shape)) if shape else 1
            out[k] = flat[pos : pos + n].reshape(shape)
            pos += n
        return out, pos

    weights, pos = take(0)
    d = header["d_model"]
    if weights["w_h1"].shape != (d, d):
        raise ValueError("checkpoint shapes disagree with d_model")
    params = DenoiserParams(weights=weights, d_model=d,
                            state_dim=header["state_dim"],
                            cond_dim=header["cond_dim"],
                            seed=header["seed"], n_steps=header["n_steps"],
                            schedule=tuple(header["schedule"]),
                            step=header["step"])
    momentum = None
    if header["has_momentum"]:
        momentum, _ = take(pos)
    return params, momentum


def read_checkpoint_meta(path) -> dict:
    """Header `meta` block only (training schedule etc.), no payload read."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    return header.get("meta", {})


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
