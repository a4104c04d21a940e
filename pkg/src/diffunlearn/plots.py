"""Static SVG figures written by hand, with no plotting library.

Three kinds: generated-vs-real scatter per class, loss histograms for
forgotten vs unseen data, and a histogram of per-batch KL values.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import histogram

log = logging.getLogger(__name__)

WIDTH, HEIGHT, MARGIN = 480, 360, 40
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _doc(body: list[str], title: str) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        *body,
        "</svg>",
    ])


def placeholder_svg(message: str) -> str:
    return _doc([f'<text x="{WIDTH / 2}" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
                 f'fill="#888">{escape(message)}</text>'], "no data")


class _Axes:
    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        span = np.where(hi > lo, hi - lo, 1.0)
        self.lo, self.span = lo - 0.05 * span, 1.1 * span

    def px(self, x, y):
        u = MARGIN + (x - self.lo[0]) / self.span[0] * (WIDTH - 2 * MARGIN)
        v = HEIGHT - MARGIN - (y - self.lo[1]) / self.span[1] * (HEIGHT - 2 * MARGIN)
        return u, v

    def frame(self) -> list[str]:
        lo, hi = self.lo, self.lo + self.span
        return [
            f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
            f'fill="none" stroke="black"/>',
            f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 14}" font-size="10">{lo[0]:.3g}</text>',
            f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 14}" font-size="10" text-anchor="end">{hi[0]:.3g}</text>',
            f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" font-size="10" text-anchor="end">{lo[1]:.3g}</text>',
            f'<text x="{MARGIN - 4}" y="{MARGIN + 8}" font-size="10" text-anchor="end">{hi[1]:.3g}</text>',
        ]


def scatter_svg(real: dict[int, np.ndarray], generated: dict[int, np.ndarray], title: str,
                max_points: int = 400) -> str:
    """Real points as faint dots, generated points as crosses, one colour per class (first two coordinates)."""
    pts = [np.atleast_2d(v)[:, :2] for v in list(real.values()) + list(generated.values()) if len(v)]
    if not pts:
        return placeholder_svg("empty sample set")
    allp = np.concatenate(pts)
    allp = allp[np.all(np.isfinite(allp), axis=1)]
    if not len(allp):
        return placeholder_svg("no finite samples")
    ax = _Axes(allp.min(axis=0), allp.max(axis=0))
    body = ax.frame()
    for c, xs in sorted(real.items()):
        col = PALETTE[c % len(PALETTE)]
        for x, y in np.atleast_2d(xs)[:max_points, :2]:
            u, v = ax.px(x, y)
            body.append(f'<circle cx="{u:.1f}" cy="{v:.1f}" r="1.5" fill="{col}" fill-opacity="0.25"/>')
    for c, xs in sorted(generated.items()):
        col = PALETTE[c % len(PALETTE)]
        for x, y in np.atleast_2d(xs)[:max_points, :2]:
            if not (np.isfinite(x) and np.isfinite(y)):
                continue
            u, v = ax.px(x, y)
            body.append(f'<path d="M{u - 2:.1f},{v:.1f}h4M{u:.1f},{v - 2:.1f}v4" stroke="{col}"/>')
    return _doc(body, title)


def histogram_svg(series: dict[str, Sequence[float]], title: str, bins: int = 30) -> tuple[str, dict]:
    """Overlaid step histograms on shared bins; also returns the counts per series."""
    vals = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    vals = {k: v[np.isfinite(v)] for k, v in vals.items()}
    if not any(len(v) for v in vals.values()):
        return placeholder_svg("empty sample set"), {}
    joined = np.concatenate([v for v in vals.values() if len(v)])
    lo, hi = float(joined.min()), float(joined.max())
    if hi <= lo:
        hi = lo + 1.0
    counts = {k: histogram(v, bins, (lo, hi))[0] for k, v in vals.items()}
    peak = max(int(c.max()) for c in counts.values()) or 1
    ax = _Axes(np.array([lo, 0.0]), np.array([hi, float(peak)]))
    body = ax.frame()
    width = (hi - lo) / bins
    for i, (name, cnt) in enumerate(counts.items()):
        col = PALETTE[i % len(PALETTE)]
        path = []
        for b, n in enumerate(cnt):
            u0, v = ax.px(lo + b * width, n)
            u1, _ = ax.px(lo + (b + 1) * width, n)
            path.append(f"{'M' if b == 0 else 'L'}{u0:.1f},{v:.1f}L{u1:.1f},{v:.1f}")
        body.append(f'<path d="{"".join(path)}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        body.append(f'<text x="{WIDTH - MARGIN - 4}" y="{MARGIN + 14 + 14 * i}" font-size="11" '
                    f'text-anchor="end" fill="{col}">{escape(name)} (n={int(cnt.sum())})</text>')
    return _doc(body, title), counts


def emit_plots(evaluation, setup, out: str | Path) -> dict[str, str]:
    """Write ``samples.svg``, ``loss_hist.svg`` and ``kl_hist.svg``; missing pieces are skipped with a warning."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, str] = {}

    def write(name, text):
        (out / name).write_text(text)
        paths[name.removesuffix(".svg")] = str(out / name)

    samples = getattr(evaluation, "samples", None)
    if samples is None:
        log.warning("no generated samples; scatter skipped")
    else:
        real = {c: setup.train_set.of_class(c).x for c in samples}
        write("samples.svg", scatter_svg(real, samples, "generated (+) vs real (.)"))
    lf, lu = getattr(evaluation, "losses_forget", None), getattr(evaluation, "losses_unseen", None)
    if lf is None or lu is None:
        log.warning("no per-sample losses; loss histogram skipped")
    else:
        write("loss_hist.svg", histogram_svg({"forget": lf, "unseen": lu}, "per-sample loss")[0])
    kf, kr = getattr(evaluation, "kl_forget_batches", None), getattr(evaluation, "kl_remain_batches", None)
    if kf is None or kr is None:
        log.warning("no KL values; KL histogram skipped")
    else:
        write("kl_hist.svg", histogram_svg({"forget": kf, "remain": kr}, "KL to N(0, I) per batch", bins=15)[0])
    return paths
