"""Top-down trajectory plots written as plain SVG text.

Each agent gets one colour; its path is drawn as per-step segments whose
opacity grows with elapsed time. Interrupted steps are marked with yellow
dots and collisions with a circle of the danger radius. Output depends only
on the trace, so identical traces give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .env import COLLISION, EpisodeTrace, TraceFormatError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")
INTERRUPT_COLOR = "#ffd700"
MIN_OPACITY = 0.15
SIZE = 600
MARGIN = 30


def _f(x: float) -> str:
    return f"{x:.2f}"


def agent_paths(trace: EpisodeTrace) -> np.ndarray:
    """(T+1, N, 3) poses including the initial one."""
    start = trace.header.get("start")
    if start is None or len(start) != trace.n_agents:
        raise TraceFormatError("trace header lacks a start pose per agent")
    poses = [start] + [[a["pose"] for a in s["agents"]] for s in trace.steps]
    return np.asarray(poses, dtype=float)


def render_svg(trace: EpisodeTrace) -> str:
    paths = agent_paths(trace)
    T, N = paths.shape[0] - 1, paths.shape[1]
    d = float(trace.header.get("d", 0.35))
    goals = np.asarray(trace.header.get("goals", []), dtype=float).reshape(-1, 3)
    pts = paths[..., :2].reshape(-1, 2)
    if len(goals):
        pts = np.vstack([pts, goals[:, :2]])
    lo = pts.min(axis=0) - d
    hi = pts.max(axis=0) + d
    span = float(max(hi - lo))
    scale = (SIZE - 2 * MARGIN) / span if span > 0 else 1.0

    def xy(p):
        # y axis up in world coordinates, down in SVG
        return (MARGIN + (p[0] - lo[0]) * scale, SIZE - MARGIN - (p[1] - lo[1]) * scale)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
        f'viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="#ffffff"/>',
    ]
    for i in range(N):
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<g class="agent" data-agent="{i}">')
        if i < len(goals):
            gx, gy = xy(goals[i])
            out.append(f'<rect class="goal" x="{_f(gx - 4)}" y="{_f(gy - 4)}" width="8" height="8" '
                       f'fill="none" stroke="{color}"/>')
        for t in range(T):
            a, b = xy(paths[t, i]), xy(paths[t + 1, i])
            if a == b:
                continue
            op = MIN_OPACITY + (1 - MIN_OPACITY) * (t + 1) / T
            out.append(f'<line class="seg" x1="{_f(a[0])}" y1="{_f(a[1])}" x2="{_f(b[0])}" '
                       f'y2="{_f(b[1])}" stroke="{color}" stroke-width="2" '
                       f'stroke-opacity="{op:.3f}"/>')
        for t, step in enumerate(trace.steps):
            if step["agents"][i].get("interrupt"):
                cx, cy = xy(paths[t + 1, i])
                out.append(f'<circle class="interrupt" cx="{_f(cx)}" cy="{_f(cy)}" r="2.5" '
                           f'fill="{INTERRUPT_COLOR}"/>')
        if trace.steps and trace.steps[-1]["agents"][i]["status"] == COLLISION:
            t_hit = next(t for t, s in enumerate(trace.steps)
                         if s["agents"][i]["status"] == COLLISION)
            cx, cy = xy(paths[t_hit + 1, i])
            out.append(f'<circle class="collision" cx="{_f(cx)}" cy="{_f(cy)}" '
                       f'r="{_f(d * scale)}" fill="none" stroke="#000000" stroke-dasharray="4 3"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_trace_file(trace_path, out_path=None) -> Path:
    """Render one JSON-lines trace; the SVG goes next to it unless ``out_path`` is given."""
    trace_path = Path(trace_path)
    trace = EpisodeTrace.read(trace_path)
    out_path = Path(out_path) if out_path is not None else trace_path.with_suffix(".svg")
    out_path.write_text(render_svg(trace))
    return out_path


__all__ = ["render_svg", "plot_trace_file", "agent_paths", "PALETTE", "INTERRUPT_COLOR"]
