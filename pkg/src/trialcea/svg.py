"""Tiny static SVG renderers for the CE plane and the acceptability curve."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 360, 50


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, float) - lo) / span * (b - a)


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<rect x="{PAD}" y="{PAD - 20}" width="{W - 2 * PAD + 20}" height="{H - 2 * PAD}" fill="none" stroke="#888"/>',
    ]


def _ticks(lo, hi, sx, sy, axis, n=5):
    out = []
    for v in np.linspace(lo, hi, n):
        label = f"{v:.3g}"
        if axis == "x":
            x = float(sx(v))
            out.append(f'<text x="{x:.1f}" y="{H - PAD + 16}" text-anchor="middle">{label}</text>')
        else:
            y = float(sy(v))
            out.append(f'<text x="{PAD - 4}" y="{y + 4:.1f}" text-anchor="end">{label}</text>')
    return out


def ce_plane_svg(delta_e, delta_c, path, threshold=15000.0, max_points=5000, title="Cost-effectiveness plane"):
    de, dc = np.asarray(delta_e, float), np.asarray(delta_c, float)
    if len(de) > max_points:
        # evenly spaced subsample keeps the file small and deterministic
        idx = np.linspace(0, len(de) - 1, max_points).astype(int)
        de, dc = de[idx], dc[idx]
    xr = max(np.abs(de).max(initial=0.0), 1e-6) * 1.1
    yr = max(np.abs(dc).max(initial=0.0), 1.0) * 1.1
    sx = _scale(-xr, xr, PAD, W - PAD + 20)
    sy = _scale(-yr, yr, H - PAD, PAD - 20)
    parts = _frame(title, "Incremental QALYs", "Incremental cost (GBP)")
    parts.append(f'<line x1="{sx(-xr):.1f}" y1="{sy(0):.1f}" x2="{sx(xr):.1f}" y2="{sy(0):.1f}" stroke="#444"/>')
    parts.append(f'<line x1="{sx(0):.1f}" y1="{sy(-yr):.1f}" x2="{sx(0):.1f}" y2="{sy(yr):.1f}" stroke="#444"/>')
    # willingness-to-pay line dC = lambda * dE, clipped to the box
    x_end = min(xr, yr / threshold)
    parts.append(f'<line x1="{sx(-x_end):.1f}" y1="{sy(-threshold * x_end):.1f}" x2="{sx(x_end):.1f}" '
                 f'y2="{sy(threshold * x_end):.1f}" stroke="#c33" stroke-dasharray="4 3"/>')
    parts += [f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.3" fill="#2a6" fill-opacity="0.5"/>'
              for x, y in zip(sx(de), sy(dc))]
    parts += _ticks(-xr, xr, sx, sy, "x") + _ticks(-yr, yr, sx, sy, "y")
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    return Path(path)


def ceac_svg(thresholds, probabilities, path, title="Cost-effectiveness acceptability curve"):
    lam, p = np.asarray(thresholds, float), np.asarray(probabilities, float)
    sx = _scale(lam.min(initial=0.0), lam.max(initial=1.0), PAD, W - PAD + 20)
    sy = _scale(0.0, 1.0, H - PAD, PAD - 20)
    parts = _frame(title, "Threshold (GBP per QALY)", "Probability cost-effective")
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(sx(lam), sy(p)))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#26a" stroke-width="1.5"/>')
    parts += _ticks(lam.min(initial=0.0), lam.max(initial=1.0), sx, sy, "x") + _ticks(0.0, 1.0, sx, sy, "y")
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    return Path(path)
