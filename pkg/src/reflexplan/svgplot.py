"""Minimal SVG emission, no plotting dependency.

Every document uses a fixed 1000x700 viewport and records the
world-to-view mapping in a <desc> element so points can be recovered
from the file.  Output is deterministic: no timestamps, stable float
formatting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

CANVAS_W = 1000
CANVAS_H = 700

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
PHASE_COLORS = {"normal": "#1f77b4", "reflect": "#ff7f0e",
                "reflect-denoise": "#2ca02c"}


def _fmt(x: float) -> str:
    s = f"{float(x):.2f}"
    return s.rstrip("0").rstrip(".") if "." in s else s


@dataclass(frozen=True)
class ViewTransform:
    """world (x, y) -> view (px) with the y axis flipped."""
    scale: float
    wx0: float   # world coords mapped to the lower-left of the drawing area
    wy0: float
    vx0: float   # view-space offset of that corner
    vy0: float

    def to_view(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        out = np.empty_like(p)
        out[:, 0] = self.vx0 + (p[:, 0] - self.wx0) * self.scale
        out[:, 1] = self.vy0 - (p[:, 1] - self.wy0) * self.scale
        return out

    def describe(self) -> str:
        return (f"view = ({_fmt(self.vx0)} + (x - {_fmt(self.wx0)}) * {self.scale:.6g}, "
                f"{_fmt(self.vy0)} - (y - {_fmt(self.wy0)}) * {self.scale:.6g})")


def fit_view(points: np.ndarray, box=(0, 0, CANVAS_W, CANVAS_H),
             margin: float = 40.0) -> ViewTransform:
    """Isotropic fit of a world point cloud into a view box."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x0, y0, x1, y1 = box
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    sx = (x1 - x0 - 2 * margin) / span[0]
    sy = (y1 - y0 - 2 * margin) / span[1]
    scale = min(sx, sy)
    # center the cloud inside the box
    cx = 0.5 * (x0 + x1) - 0.5 * span[0] * scale
    cy = 0.5 * (y0 + y1) + 0.5 * span[1] * scale
    return ViewTransform(scale=scale, wx0=float(lo[0]), wy0=float(lo[1]),
                         vx0=cx, vy0=cy)


def polyline(pts: np.ndarray, stroke: str, width: float = 1.5,
             dash: str | None = None, opacity: float | None = None) -> str:
    coords = " ".join(f"{_fmt(p[0])},{_fmt(p[1])}" for p in np.atleast_2d(pts))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    if opacity is not None:
        extra += f' stroke-opacity="{_fmt(opacity)}"'
    return (f'<polyline fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}"{extra} points="{coords}"/>')


def circle(cx: float, cy: float, r: float, fill: str,
           stroke: str | None = None) -> str:
    extra = f' stroke="{stroke}"' if stroke else ""
    return f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="{fill}"{extra}/>'


def rect(x: float, y: float, w: float, h: float, fill: str) -> str:
    return (f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
            f'height="{_fmt(h)}" fill="{fill}"/>')


def line(x1, y1, x2, y2, stroke: str, width: float = 1.0,
         dash: str | None = None) -> str:
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{_fmt(width)}"{extra}/>')


def text(x: float, y: float, s: str, size: int = 12, fill: str = "#333",
         anchor: str = "start") -> str:
    return (f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="sans-serif" fill="{fill}" '
            f'text-anchor="{anchor}">{escape(s)}</text>')


def document(elements: list, desc: str, title: str = "") -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" '
            f'height="{CANVAS_H}" viewBox="0 0 {CANVAS_W} {CANVAS_H}">',
            f"<desc>{escape(desc)}</desc>",
            rect(0, 0, CANVAS_W, CANVAS_H, "#ffffff")]
    if title:
        head.append(text(CANVAS_W / 2, 24, title, size=16, anchor="middle"))
    return "\n".join(head + list(elements) + ["</svg>"]) + "\n"


def save(path, content: str) -> None:
    Path(path).write_text(content)


# --------------------------------------------------------------------------
# Domain plots


def _corridor_elements(center, tf: ViewTransform) -> list:
    nx = -np.sin(center.theta)
    ny = np.cos(center.theta)
    left = center.xy + center.half_width * np.stack([nx, ny], axis=1)
    right = center.xy - center.half_width * np.stack([nx, ny], axis=1)
    return [polyline(tf.to_view(left), "#888888", 1.2),
            polyline(tf.to_view(right), "#888888", 1.2),
            polyline(tf.to_view(center.xy), "#bbbbbb", 1.0, dash="6,6")]


def plot_scenario(scene, planned: dict, violation_masks: dict, trace_rows: list,
                  gamma: float | None, path) -> None:
    """Road corridor, planned ego paths, violation markers, and a
    confidence-trace panel along the bottom of the canvas.

    planned maps label -> world-frame (n, 2) ego positions; violation_masks
    maps label -> boolean per-step mask aligned with those positions.
    """
    from .scenario import build_road   # local import avoids a cycle at module load

    center = build_road(scene.road)
    cloud = [center.xy]
    for xy in planned.values():
        cloud.append(np.atleast_2d(xy))
    pts = np.vstack(cloud)
    tf = fit_view(pts, box=(0, 0, CANVAS_W, 480), margin=30.0)

    els = _corridor_elements(center, tf)
    for j, (label, xy) in enumerate(sorted(planned.items())):
        color = PALETTE[j % len(PALETTE)]
        v = tf.to_view(xy)
        els.append(polyline(v, color, 2.0))
        els.append(text(20, 40 + 16 * j, label, fill=color))
        mask = violation_masks.get(label)
        if mask is not None:
            for i in np.nonzero(mask)[0]:
                if i < v.shape[0]:
                    els.append(circle(v[i, 0], v[i, 1], 3.0, "none", stroke="#d62728"))
    ego_v = tf.to_view(np.asarray([[scene.ego[0], scene.ego[1]]]))
    els.append(circle(ego_v[0, 0], ego_v[0, 1], 4.0, "#000000"))
    for j in range(scene.neighbors.shape[0]):
        p = tf.to_view(scene.neighbors[j, -1, :2][None, :])
        els.append(circle(p[0, 0], p[0, 1], 3.5, "#7f7f7f"))
    for ox, oy, r in scene.static_obstacles:
        p = tf.to_view(np.asarray([[ox, oy]]))
        els.append(circle(p[0, 0], p[0, 1], max(2.5, r * tf.scale), "#c49c94"))

    els.extend(_trace_panel(trace_rows, gamma, y0=510, y1=680))
    save(path, document(els, desc="scenario plot; " + tf.describe(),
                        title=f"{scene.kind} seed {scene.seed}"))


def _trace_panel(trace_rows: list, gamma: float | None, y0: int, y1: int) -> list:
    els = [line(60, y1, CANVAS_W - 20, y1, "#444444"),
           line(60, y0, 60, y1, "#444444"),
           text(30, (y0 + y1) / 2, "c", anchor="middle"),
           text((60 + CANVAS_W - 20) / 2, y1 + 16, "denoise step", anchor="middle")]
    if not trace_rows:
        els.append(text(70, (y0 + y1) / 2, "no confidence trace", fill="#999"))
        return els

    def ypix(c):
        return y1 - (y1 - y0) * min(max(c, 0.0), 1.0)

    n = len(trace_rows)
    xs = np.linspace(70, CANVAS_W - 30, max(n, 2))
    if gamma is not None:
        els.append(line(60, ypix(gamma), CANVAS_W - 20, ypix(gamma),
                        "#d62728", dash="4,4"))
        els.append(text(CANVAS_W - 18, ypix(gamma) + 4, f"gamma={_fmt(gamma)}",
                        size=10, fill="#d62728"))
    normal = [(xs[i], ypix(r.c)) for i, r in enumerate(trace_rows) if r.phase == "normal"]
    if len(normal) >= 2:
        els.append(polyline(np.asarray(normal), PHASE_COLORS["normal"], 1.0,
                            opacity=0.6))
    for i, r in enumerate(trace_rows):
        color = PHASE_COLORS.get(r.phase, "#333333")
        els.append(circle(xs[i], ypix(r.c), 3.0, color))
    for j, phase in enumerate(("normal", "reflect", "reflect-denoise")):
        els.append(circle(80 + 150 * j, y0 - 10, 4, PHASE_COLORS[phase]))
        els.append(text(90 + 150 * j, y0 - 6, phase, size=11))
    return els


def plot_curve(xs, ys, xlabel: str, ylabel: str, path, title: str = "") -> None:
    """Score-vs-parameter line chart with point markers."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("plot_curve needs at least one point")
    x0, x1, y0, y1 = 80.0, CANVAS_W - 40.0, CANVAS_H - 80.0, 60.0
    xspan = max(xs.max() - xs.min(), 1e-9)
    yspan = max(ys.max() - ys.min(), 1e-9)

    def vx(x):
        return x0 + (x - xs.min()) / xspan * (x1 - x0)

    def vy(y):
        return y0 - (y - ys.min()) / yspan * (y0 - y1)

    els = [line(x0, y0, x1, y0, "#444444"), line(x0, y0, x0, y1, "#444444"),
           text((x0 + x1) / 2, y0 + 40, xlabel, anchor="middle"),
           text(24, (y0 + y1) / 2, ylabel, anchor="middle")]
    for x in np.unique(xs):
        els.append(line(vx(x), y0, vx(x), y0 + 5, "#444444"))
        els.append(text(vx(x), y0 + 20, _fmt(x), size=10, anchor="middle"))
    for yv in np.linspace(ys.min(), ys.max(), 5):
        els.append(line(x0 - 5, vy(yv), x0, vy(yv), "#444444"))
        els.append(text(x0 - 8, vy(yv) + 4, _fmt(yv), size=10, anchor="end"))
    pts = np.stack([vx(xs), vy(ys)], axis=1)
    order = np.argsort(xs, kind="stable")
    els.append(polyline(pts[order], PALETTE[0], 2.0))
    for p in pts:
        els.append(circle(p[0], p[1], 4.0, PALETTE[0]))
    desc = (f"curve plot; x in [{_fmt(xs.min())}, {_fmt(xs.max())}] -> "
            f"[{_fmt(x0)}, {_fmt(x1)}] px; y in [{_fmt(ys.min())}, {_fmt(ys.max())}] -> "
            f"[{_fmt(y0)}, {_fmt(y1)}] px (y flipped)")
    save(path, document(els, desc=desc, title=title))
