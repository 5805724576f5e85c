"""Joint trajectory container and position-derived kinematics.

A trajectory is a (rows, steps, 4) array: row 0 is the ego vehicle,
remaining rows are neighbouring agents (zero-padded up to MAX_NEIGHBORS).
Channels are (x, y, cos heading, sin heading) sampled at a fixed step.
Speed and curvature are always derived from the position channels; the
heading channels are only trusted after :func:`normalize_headings`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Channel indices.
CH_X, CH_Y, CH_COS, CH_SIN = 0, 1, 2, 3

MAX_NEIGHBORS = 8
AGENT_ROWS = MAX_NEIGHBORS + 1
HORIZON_STEPS = 80
TIME_STEP = 0.1

# Metres per unit of the generative state.  Positions are divided by this
# before entering the denoiser so every channel is O(1).
POS_SCALE = 25.0

# Decoupling threshold: |kappa * v^2 - lateral second difference| above this
# marks a planned/executed mismatch.
COUPLING_THRESHOLD = 4.0

# Arc steps shorter than this are treated as numerically degenerate.
DEGENERATE_ARC = 1e-6


@dataclass(frozen=True)
class Trajectory:
    """Agent states over a fixed horizon; positions in metres, ego frame."""

    data: np.ndarray  # (rows, steps, 4) float64
    dt: float = TIME_STEP

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ValueError(f"trajectory data must be (rows, steps, 4), got {self.data.shape}")
        if self.data.shape[1] < 3:
            raise ValueError("trajectory needs at least 3 steps")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def steps(self) -> int:
        return self.data.shape[1]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def positions(self, row: int = 0) -> np.ndarray:
        return self.data[row, :, :2]


@dataclass(frozen=True)
class KinematicProfile:
    """Per-step quantities derived from one row's positions."""

    v: np.ndarray          # speed, m/s
    kappa: np.ndarray      # signed path curvature, 1/m, clamped to |k| <= 1
    a_y: np.ndarray        # lateral acceleration kappa * v^2
    j_lat: np.ndarray      # time derivative of a_y
    tangent: np.ndarray    # (steps, 2) unit path tangents
    degenerate: np.ndarray  # bool, True where the arc step was too short


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def kinematics(traj: Trajectory, row: int = 0) -> KinematicProfile:
    """Derive speed, curvature, lateral acceleration and jerk from positions.

    Central differences in the interior, one-sided copies at the endpoints.
    Degenerate steps (arc length < 1e-6 m) get kappa = 0 and a flag instead
    of a blow-up.
    """
    p = traj.positions(row).astype(np.float64)
    n = p.shape[0]
    dt = traj.dt

    chords = np.diff(p, axis=0)                      # (n-1, 2)
    chord_len = np.hypot(chords[:, 0], chords[:, 1])  # (n-1,)

    v = np.empty(n)
    v[: n - 1] = chord_len / dt
    v[n - 1] = v[n - 2]

    # Chord headings; zero-length chords give arctan2(0, 0) = 0 and are
    # flagged below rather than trusted.
    phi = np.arctan2(chords[:, 1], chords[:, 0])

    kappa = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    dphi = _wrap_angle(phi[1:] - phi[:-1])            # turn angle at k = 1..n-2
    ds = 0.5 * (chord_len[1:] + chord_len[:-1])
    bad = (ds < DEGENERATE_ARC) | (np.minimum(chord_len[1:], chord_len[:-1]) < DEGENERATE_ARC)
    interior = np.zeros(n - 2)
    ok = ~bad
    interior[ok] = dphi[ok] / ds[ok]
    kappa[1 : n - 1] = interior
    degenerate[1 : n - 1] = bad
    kappa[0], kappa[n - 1] = kappa[1], kappa[n - 2]
    degenerate[0], degenerate[n - 1] = degenerate[1], degenerate[n - 2]
    np.clip(kappa, -1.0, 1.0, out=kappa)

    a_y = kappa * v * v

    j_lat = np.empty(n)
    j_lat[1 : n - 1] = (a_y[2:] - a_y[: n - 2]) / (2.0 * dt)
    j_lat[0] = (a_y[1] - a_y[0]) / dt
    j_lat[n - 1] = (a_y[n - 1] - a_y[n - 2]) / dt

    tangent = np.zeros((n, 2))
    span = p[2:] - p[: n - 2]
    tangent[1 : n - 1] = span
    tangent[0] = p[1] - p[0]
    tangent[n - 1] = p[n - 1] - p[n - 2]
    norms = np.hypot(tangent[:, 0], tangent[:, 1])
    safe = norms > DEGENERATE_ARC
    tangent[safe] /= norms[safe, None]
    tangent[~safe] = (1.0, 0.0)

    return KinematicProfile(v=v, kappa=kappa, a_y=a_y, j_lat=j_lat,
                            tangent=tangent, degenerate=degenerate)


@dataclass(frozen=True)
class CouplingReport:
    mask: np.ndarray        # bool per step; endpoints always False
    rate: float             # mean of mask
    mismatch: np.ndarray    # |kappa v^2 - executed a_y| per step (0 at ends)
    degenerate: np.ndarray  # bool per step


def coupling_violations(traj: Trajectory, row: int = 0,
                        threshold: float = COUPLING_THRESHOLD) -> CouplingReport:
    """Mark steps where planned curvature and executed lateral accel disagree.

    Planned lateral acceleration is kappa * v^2 from the path geometry;
    executed lateral acceleration is the component of the position second
    difference perpendicular to the local tangent.  A gap above `threshold`
    flags the step.  Degenerate steps never count as violations.
    """
    p = traj.positions(row).astype(np.float64)
    n = p.shape[0]
    dt = traj.dt
    prof = kinematics(traj, row)

    mismatch = np.zeros(n)
    mask = np.zeros(n, dtype=bool)

    acc = (p[2:] - 2.0 * p[1 : n - 1] + p[: n - 2]) / (dt * dt)   # (n-2, 2)
    span = p[2:] - p[: n - 2]
    span_len = np.hypot(span[:, 0], span[:, 1])
    ok = (span_len > DEGENERATE_ARC) & ~prof.degenerate[1 : n - 1]
    u = np.zeros_like(span)
    u[ok] = span[ok] / span_len[ok, None]
    # Lateral = cross(u, acc): positive to the left of the tangent.
    a_exec = u[:, 0] * acc[:, 1] - u[:, 1] * acc[:, 0]
    planned = prof.a_y[1 : n - 1]
    gap = np.abs(planned - a_exec)
    mismatch[1 : n - 1][ok] = gap[ok]
    mask[1 : n - 1] = ok & (gap > threshold)

    return CouplingReport(mask=mask, rate=float(mask.mean()),
                          mismatch=mismatch, degenerate=prof.degenerate)


def normalize_headings(traj: Trajectory) -> Trajectory:
    """Project heading channels onto the unit circle, all rows.

    Pairs with norm below 1e-6 fall back to the path tangent at that step
    (or +x when the path itself is degenerate).  Idempotent.
    """
    data = traj.data.astype(np.float64).copy()
    for row in range(data.shape[0]):
        h = data[row, :, CH_COS : CH_SIN + 1]
        norms = np.hypot(h[:, 0], h[:, 1])
        good = norms >= 1e-6
        h[good] /= norms[good, None]
        if not np.all(good):
            tang = kinematics(Trajectory(data=data[row : row + 1], dt=traj.dt), 0).tangent
            h[~good] = tang[~good]
        data[row, :, CH_COS : CH_SIN + 1] = h
    return Trajectory(data=data, dt=traj.dt)


def encode_state(traj: Trajectory) -> np.ndarray:
    """Trajectory -> generative state: positions shrunk by POS_SCALE."""
    out = traj.data.astype(np.float64).copy()
    out[:, :, :2] /= POS_SCALE
    return out


def decode_state(state: np.ndarray, dt: float = TIME_STEP) -> Trajectory:
    """Generative state -> trajectory in metres."""
    data = np.asarray(state, dtype=np.float64).copy()
    data[:, :, :2] *= POS_SCALE
    return Trajectory(data=data, dt=dt)
