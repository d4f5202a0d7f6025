"""
SVG court diagrams of a possession: one polyline per object, circles at the
start, diamonds at the end. Output is plain text with fixed number formatting,
so identical inputs produce identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from xml.sax.saxutils import escape
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from .core import N_OBJECTS, CourtSpec, RejectedInput, TrajectoryTensor


@dataclass(frozen=True)
class RenderStyle:
    offense_color: str = "#1f5fbf"
    defense_color: str = "#c0392b"
    ball_color: str = "#e67e22"
    highlight_color: str = "#d4148c"
    out_of_bounds_color: str = "#8e44ad"
    highlight_player_idx: Optional[int] = None
    end_marker: str = "diamond"
    width_px: int = 940
    height_px: int = 500

    def __post_init__(self) -> None:
        colors = {self.offense_color, self.defense_color, self.ball_color}
        if len(colors) != 3:
            raise RejectedInput("offense, defense and ball colors must differ")
        if self.width_px < 100 or self.height_px < 100:
            raise RejectedInput("image must be at least 100 x 100 px")
        if self.end_marker not in ("diamond", "square"):
            raise RejectedInput(f"unsupported end marker {self.end_marker!r}")
        if self.highlight_player_idx is not None and not 1 <= self.highlight_player_idx <= 10:
            raise RejectedInput("highlight_player_idx must name a player slot 1-10")


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, court: CourtSpec, style: RenderStyle):
        self.court = court
        self.style = style
        self.pad = 20.0
        self.sx = (style.width_px - 2 * self.pad) / court.length_ft
        self.sy = (style.height_px - 2 * self.pad) / court.width_ft

    def xy(self, x: float, y: float) -> tuple[float, float]:
        # court y grows upward; svg y grows downward
        return self.pad + x * self.sx, self.pad + (self.court.width_ft - y) * self.sy


def _court_layer(cv: _Canvas) -> list[str]:
    c = cv.court
    x0, y0 = cv.xy(0, c.width_ft)
    x1, y1 = cv.xy(c.length_ft, 0)
    mx, _ = cv.xy(c.length_ft / 2, 0)
    out = ['<g id="court" fill="none" stroke="#555555" stroke-width="1.5">']
    out.append(f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" height="{_f(y1 - y0)}"/>')
    out.append(f'<line x1="{_f(mx)}" y1="{_f(y0)}" x2="{_f(mx)}" y2="{_f(y1)}"/>')
    cx, cy = cv.xy(c.length_ft / 2, c.width_ft / 2)
    out.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(6 * cv.sx)}"/>')
    for bx, by, _ in c.basket_positions:
        px, py = cv.xy(bx, by)
        out.append(f'<circle class="basket" cx="{_f(px)}" cy="{_f(py)}" r="{_f(0.75 * cv.sx)}"/>')
        out.append(f'<circle class="arc" cx="{_f(px)}" cy="{_f(py)}" r="{_f(23.75 * cv.sx)}"/>')
    out.append("</g>")
    return out


def _color(style: RenderStyle, obj: int) -> str:
    if obj == 0:
        return style.ball_color
    if style.highlight_player_idx == obj:
        return style.highlight_color
    return style.offense_color if obj <= 5 else style.defense_color


def _end_marker(style: RenderStyle, x: float, y: float, color: str, obj: int) -> str:
    r = 6.0
    if style.end_marker == "square":
        return (f'<rect class="end" data-object="{obj}" x="{_f(x - r)}" y="{_f(y - r)}" '
                f'width="{_f(2 * r)}" height="{_f(2 * r)}" fill="{color}"/>')
    pts = f"{_f(x)},{_f(y - r)} {_f(x + r)},{_f(y)} {_f(x)},{_f(y + r)} {_f(x - r)},{_f(y)}"
    return f'<polygon class="end" data-object="{obj}" points="{pts}" fill="{color}"/>'


def render_svg(traj: TrajectoryTensor, court: CourtSpec = CourtSpec(), style: RenderStyle = RenderStyle(),
               metadata: Optional[Mapping[str, Any]] = None) -> str:
    if traj.normalized:
        raise RejectedInput("render expects a denormalized trajectory")
    pos = traj.positions()[: traj.valid_len]
    bad = np.argwhere(~np.isfinite(pos))
    if len(bad):
        t, obj, axis = bad[0]
        raise RejectedInput(f"non-finite coordinate at row {t}, object {obj}, axis {axis}")
    cv = _Canvas(court, style)
    hi = court.upper
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{style.width_px}" height="{style.height_px}" '
        f'viewBox="0 0 {style.width_px} {style.height_px}">',
        '<rect width="100%" height="100%" fill="#fbf7ef"/>',
    ]
    if metadata:
        out.append(f"<metadata>{escape(json.dumps(metadata, sort_keys=True, default=str))}</metadata>")
    out += _court_layer(cv)
    out.append('<g id="traces" fill="none" stroke-width="2">')
    for obj in range(N_OBJECTS):
        pts = " ".join(f"{_f(px)},{_f(py)}" for px, py in (cv.xy(x, y) for x, y in pos[:, obj, :2]))
        dash = ' stroke-dasharray="4 3"' if obj == 0 else ""
        out.append(f'<polyline class="trace" data-object="{obj}" stroke="{_color(style, obj)}"{dash} points="{pts}"/>')
    out.append("</g>")
    out.append('<g id="markers">')
    for obj in range(N_OBJECTS):
        color = _color(style, obj)
        sx, sy = cv.xy(*pos[0, obj, :2])
        out.append(f'<circle class="start" data-object="{obj}" cx="{_f(sx)}" cy="{_f(sy)}" r="5" fill="{color}"/>')
        ex, ey = cv.xy(*pos[-1, obj, :2])
        out.append(_end_marker(style, ex, ey, color, obj))
    outside = np.argwhere(np.any((pos < 0) | (pos > hi), axis=-1))
    for t, obj in outside:
        ox, oy = cv.xy(*pos[t, obj, :2])
        out.append(f'<circle class="out-of-bounds" data-object="{obj}" data-row="{t}" cx="{_f(ox)}" cy="{_f(oy)}" '
                   f'r="3" fill="{style.out_of_bounds_color}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_possession(traj: TrajectoryTensor, court: CourtSpec, style: RenderStyle,
                      out_path: Union[str, Path], metadata: Optional[Mapping[str, Any]] = None) -> Path:
    svg = render_svg(traj, court, style, metadata)
    path = Path(out_path)
    path.write_text(svg)
    return path
