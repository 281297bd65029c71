"""SVG dose-response plots written by hand (no plotting dependency).

One file per model: the EMM curve over lambda with its 95% band, and the
observed per-time means as small grey dots.
"""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

from .errors import MissingResults

W, H = 640, 420
MARGIN = dict(left=64, right=24, top=40, bottom=52)


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + step * 1e-9, step)]


def _fmt(v):
    return f"{v:.1f}"


def render_curve(emm: pd.DataFrame, raw: pd.DataFrame | None = None, title: str = "",
                 ylabel: str = "estimated mean") -> str:
    """SVG text for one EMM table (columns lambda, emm, ci_lower, ci_upper)."""
    if emm is None or len(emm) == 0:
        raise MissingResults("empty EMM table")
    e = emm.sort_values("lambda")
    if "prob" in e.columns:
        y, lo, hi = e["prob"], e["prob_lower"], e["prob_upper"]
        ylabel = "probability"
        raw = None  # raw 0/1 means live on a different scale from the link
    else:
        y, lo, hi = e["emm"], e["ci_lower"], e["ci_upper"]
    x = e["lambda"].to_numpy(dtype=float)
    vals = [lo.min(), hi.max()]
    if raw is not None and len(raw):
        vals += [raw["mean"].min(), raw["mean"].max()]
    ymin, ymax = float(min(vals)), float(max(vals))
    pad = 0.05 * (ymax - ymin or 1.0)
    ymin, ymax = ymin - pad, ymax + pad
    px = _scale(-1.1, 1.1, MARGIN["left"], W - MARGIN["right"])
    py = _scale(ymin, ymax, H - MARGIN["bottom"], MARGIN["top"])

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>']
    x0, x1 = MARGIN["left"], W - MARGIN["right"]
    y0, y1 = H - MARGIN["bottom"], MARGIN["top"]
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in (-1.0, -0.5, 0.0, 0.5, 1.0):
        tx = _fmt(px(t))
        out.append(f'<line x1="{tx}" y1="{y0}" x2="{tx}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{tx}" y="{y0 + 19}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(ymin, ymax):
        ty = _fmt(py(t))
        out.append(f'<line x1="{x0 - 5}" y1="{ty}" x2="{x0}" y2="{ty}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{ty}" text-anchor="end" '
                   f'dominant-baseline="middle">{t:g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{H - 12}" text-anchor="middle">lambda</text>')
    out.append(f'<text transform="translate(16 {(y0 + y1) / 2}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')

    if raw is not None and len(raw):
        for _, r in raw.iterrows():
            out.append(f'<circle class="raw-mean" cx="{_fmt(px(r["lambda"]))}" '
                       f'cy="{_fmt(py(r["mean"]))}" r="1.8" fill="#999" fill-opacity="0.6"/>')

    upper = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(x), py(hi)))
    lower = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(x[::-1]), py(lo.to_numpy()[::-1])))
    out.append(f'<polygon class="ci-band" points="{upper} {lower}" fill="#3b6ea5" '
               f'fill-opacity="0.25" stroke="none"/>')
    line = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(x), py(y)))
    out.append(f'<polyline points="{line}" fill="none" stroke="#3b6ea5" stroke-width="2"/>')
    for a, b in zip(px(x), py(y)):
        out.append(f'<circle class="emm-point" cx="{_fmt(a)}" cy="{_fmt(b)}" r="4" '
                   f'fill="#3b6ea5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(results_dir, out_dir=None) -> list[Path]:
    """Write ``<model>.svg`` for every ``contrasts/<model>/emm.csv`` found."""
    root = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else root / "plots"
    tables = sorted((root / "contrasts").glob("*/emm.csv"))
    if not tables:
        raise MissingResults(f"no EMM tables under {root / 'contrasts'}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in tables:
        name = path.parent.name
        emm = pd.read_csv(path)
        if len(emm) == 0:
            raise MissingResults(f"empty EMM table {path}")
        raw_path = root / "models" / name / "raw_means.csv"
        raw = pd.read_csv(raw_path) if raw_path.exists() else None
        svg = render_curve(emm, raw, title=name)
        target = out_dir / f"{name}.svg"
        target.write_text(svg)
        written.append(target)
    return written
