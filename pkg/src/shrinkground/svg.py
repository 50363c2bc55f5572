"""SVG frames for episode traces: scene boxes, the current patch and triad activity."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .env import EpisodeTrace
from .scene import Scene

_SCALE = 4.0  # pixels per image unit
_TEXT_H = 18


def _rect(coords, stroke: str, width: float = 1.0, dash: str | None = None, fill: str = "none") -> str:
    x0, y0, x1, y1 = (c * _SCALE for c in coords)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" height="{y1 - y0:.2f}" '
            f'fill="{fill}" stroke="{stroke}" stroke-width="{width}"{extra}/>')


def render_frame(trace: EpisodeTrace, scene: Scene, step: int) -> str:
    """One SVG document for ``trace.steps[step]``; inactive triads are drawn in gray."""
    rec = trace.steps[step]
    W, H = scene.frame.W * _SCALE, scene.frame.H * _SCALE
    lines = len(trace.triads) + 2
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H + lines * _TEXT_H:.0f}">',
           f'<rect x="0" y="0" width="{W:.0f}" height="{H:.0f}" fill="#fafafa" stroke="black"/>']
    for o in scene.objects:
        out.append(_rect(o.box.to_list(), "#888888", fill="#dddddd"))
        x, y = o.box.x_tl * _SCALE + 2, o.box.y_tl * _SCALE + 12
        label = " ".join([*sorted(o.attributes), o.category])
        out.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="10" fill="#444444">{escape(label)}</text>')
    out.append(_rect(trace.gt_box, "#2a9d2a", 2.0, dash="6,3"))
    out.append(_rect(rec["patch"], "#d62828", 2.5))
    y = H + _TEXT_H - 4
    action = rec["action"] or "start"
    head = f'step {step}: {action}  reward {rec["reward"]:g}  "{trace.query}"'
    out.append(f'<text x="4" y="{y:.0f}" font-size="13">{escape(head)}</text>')
    for triad, active in zip(trace.triads, rec["triad_active"]):
        y += _TEXT_H
        color = "black" if active else "#aaaaaa"
        out.append(f'<text x="12" y="{y:.0f}" font-size="13" fill="{color}">'
                   f'{escape("(" + ", ".join(triad) + ")")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_frames(trace: EpisodeTrace, scene: Scene, out_dir: str | Path, stem: str = "frame") -> list[Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(trace.steps)):
        p = d / f"{stem}_{i:02d}.svg"
        p.write_text(render_frame(trace, scene, i))
        paths.append(p)
    return paths
