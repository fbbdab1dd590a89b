"""Static SVG line charts and run manifests."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass(frozen=True)
class Axes:
    title: str = ""
    x_label: str | None = None  # defaults to the first curve's x_label
    y_label: str = "perplexity"
    y_field: str = "ppl"
    log_x: bool = False
    width: int = 640
    height: int = 400


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + step * 1e-9:
        out.append(round(v, 10))
        v += step
    return out


def _label(v: float) -> str:
    return f"{v:g}"


def render_chart(curves: Sequence, axes: Axes = Axes()) -> str:
    """One polyline with point markers per curve, plus a legend entry per curve."""
    if not curves or not any(c.points for c in curves):
        raise ValueError("render_chart needs at least one curve with at least one point")
    if any(not c.points for c in curves):
        raise ValueError("every curve needs at least one point")
    w, h = axes.width, axes.height
    left, right, top, bottom = 70, 170, 40, 55
    pw, ph = w - left - right, h - top - bottom

    def xval(p):
        return math.log2(p.x) if axes.log_x else float(p.x)

    xs = [xval(p) for c in curves for p in c.points]
    ys = [float(getattr(p, axes.y_field)) for c in curves for p in c.points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    if y0 == y1:
        pad = abs(y0) * 0.05 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    else:
        pad = (y1 - y0) * 0.05
        y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    x_label = axes.x_label or getattr(curves[0], "x_label", "x")
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
    ]
    if axes.title:
        out.append(f'<text x="{w / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(axes.title)}</text>')
    out.append(
        f'<path d="M{left} {top} V{top + ph} H{left + pw}" stroke="black" fill="none"/>'
    )
    if axes.log_x:
        xticks = [float(v) for v in range(math.floor(x0), math.ceil(x1) + 1) if x0 <= v <= x1]
    else:
        xticks = _ticks(x0, x1)
    for v in xticks:
        px = sx(v)
        label = _label(2 ** v) if axes.log_x else _label(v)
        out.append(f'<line x1="{_fmt(px)}" y1="{top + ph}" x2="{_fmt(px)}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px)}" y="{top + ph + 18}" text-anchor="middle">{label}</text>')
    for v in _ticks(y0, y1):
        py = sy(v)
        out.append(f'<line x1="{left - 5}" y1="{_fmt(py)}" x2="{left}" y2="{_fmt(py)}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(py + 4)}" text-anchor="end">{_label(v)}</text>')
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{h - 12}" text-anchor="middle">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(axes.y_label)}</text>'
    )

    for i, curve in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = [(sx(xval(p)), sy(float(getattr(p, axes.y_field)))) for p in curve.points]
        if len(pts) > 1:
            coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            out.append(f'<circle class="marker" cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{color}"/>')
        ly = top + 10 + 18 * i
        lx = left + pw + 15
        out.append(f'<g class="legend-entry"><rect x="{lx}" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{lx + 18}" y="{ly + 1}">{escape(curve.name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, curves, axes: Axes = Axes()) -> None:
    Path(path).write_text(render_chart(curves, axes), encoding="utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, manifest: dict, outputs: Sequence[str] = (), name: str = "manifest.json") -> Path:
    """Write the manifest with a hash of every listed output file."""
    out_dir = Path(out_dir)
    manifest = dict(manifest)
    manifest["outputs"] = {o: sha256_file(out_dir / o) for o in sorted(outputs)}
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
