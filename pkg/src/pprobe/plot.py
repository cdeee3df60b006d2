"""Dependency-free SVG scatter of a sweep with its Pareto frontier."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 90, 30, 40, 70


def axis_labels(mode: str, use_bleu: bool) -> tuple[str, str]:
    x = "BLEU" if use_bleu else "negative task loss (nats/token)"
    if mode == "Add":
        y = "negative probe CE (nats, higher = more information)"
    else:
        y = "probe CE (nats, higher = less information)"
    return x, y


def _scale(lo: float, hi: float, a: float, b: float):
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    return lambda v: a + (v - lo) / (hi - lo) * (b - a), lo, hi


def scatter_svg(points: Sequence[tuple[float, float]], on_front: Sequence[bool],
                reference: Sequence[bool], x_label: str, y_label: str, title: str = "") -> str:
    """Circles for runs, triangles for reference runs, polyline through the frontier."""
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
             f'width="{WIDTH}" height="{HEIGHT}">',
             f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        lines.append(f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>')
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]
    sx, x0, x1 = _scale(min(xs), max(xs), LEFT, WIDTH - RIGHT)
    sy, y0, y1 = _scale(min(ys), max(ys), HEIGHT - BOTTOM, TOP)

    lines.append(f'<line class="axis" x1="{LEFT}" y1="{HEIGHT - BOTTOM}" x2="{WIDTH - RIGHT}" '
                 f'y2="{HEIGHT - BOTTOM}" stroke="black"/>')
    lines.append(f'<line class="axis" x1="{LEFT}" y1="{HEIGHT - BOTTOM}" x2="{LEFT}" y2="{TOP}" stroke="black"/>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        lines.append(f'<text x="{sx(xv):.1f}" y="{HEIGHT - BOTTOM + 18}" text-anchor="middle" '
                     f'font-size="11">{xv:.3g}</text>')
        lines.append(f'<text x="{LEFT - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="11">{yv:.3g}</text>')
    lines.append(f'<text class="xlabel" x="{(LEFT + WIDTH - RIGHT) / 2:.1f}" y="{HEIGHT - 20}" '
                 f'text-anchor="middle" font-size="13">{escape(x_label)}</text>')
    cy = (TOP + HEIGHT - BOTTOM) / 2
    lines.append(f'<text class="ylabel" x="20" y="{cy:.1f}" text-anchor="middle" font-size="13" '
                 f'transform="rotate(-90 20 {cy:.1f})">{escape(y_label)}</text>')

    front = sorted((p for p, f in zip(points, on_front) if f), key=lambda p: (p[0], -p[1]))
    if front:
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in front)
        lines.append(f'<polyline class="frontier" points="{coords}" fill="none" stroke="crimson" stroke-width="2"/>')
    for (x, y), f, ref in zip(points, on_front, reference):
        px, py = sx(x), sy(y)
        fill = "crimson" if f else "steelblue"
        if ref:
            lines.append(f'<polygon class="reference" points="{px:.2f},{py - 7:.2f} {px - 6:.2f},{py + 5:.2f} '
                         f'{px + 6:.2f},{py + 5:.2f}" fill="{fill}" stroke="black"/>')
        else:
            lines.append(f'<circle class="run" cx="{px:.2f}" cy="{py:.2f}" r="5" fill="{fill}" stroke="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def frontier_svg(runs, on_front: Sequence[bool], mode: str, use_bleu: bool = False, task: str = "") -> str:
    from .trainer import orient_run

    keep = [i for i, r in enumerate(runs) if not r.failed]
    pts = [orient_run(runs[i], mode, use_bleu).values for i in keep]
    x_label, y_label = axis_labels(mode, use_bleu)
    title = f"{task} {mode}".strip()
    return scatter_svg(pts, [on_front[i] for i in keep], [runs[i].is_reference for i in keep],
                       x_label, y_label, title)
