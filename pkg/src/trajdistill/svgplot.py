"""Minimal SVG plotting built on xml.etree, no drawing dependencies.

Two chart kinds cover the package's needs: line plots (training curves,
metric-versus-steps) and top-down trajectory overlays (history, ground
truth, sampled futures). Output is plain SVG 1.1 parseable by any XML
reader.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET

import numpy as np

from .exceptions import ContractViolation

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _svg_root(width: int, height: int) -> ET.Element:
    return ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "width": str(width),
            "height": str(height),
            "viewBox": f"0 0 {width} {height}",
        },
    )


def _text(parent: ET.Element, x: float, y: float, s: str, size: int = 11, anchor: str = "start"):
    el = ET.SubElement(
        parent,
        "text",
        {
            "x": f"{x:.1f}",
            "y": f"{y:.1f}",
            "font-size": str(size),
            "font-family": "sans-serif",
            "text-anchor": anchor,
            "fill": "#333",
        },
    )
    el.text = s


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s for s in (mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * max(abs(hi), 1.0):
        out.append(round(v, 12))
        v += step
    return out


def _fmt_tick(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1000 or abs(v) < 0.01:
        return f"{v:.1e}"
    return f"{v:g}"


def line_plot(
    path: str,
    series: list[tuple[str, np.ndarray, np.ndarray]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    width: int = 640,
    height: int = 400,
    log_y: bool = False,
) -> None:
    """Write a multi-series line chart; each series is (label, xs, ys)."""
    if not series:
        raise ContractViolation("line_plot needs at least one series")
    ml, mr, mt, mb = 60, 16, 28, 44
    pw, ph = width - ml - mr, height - mt - mb

    def ty(v: float) -> float:
        return math.log10(v) if log_y else v

    all_x = np.concatenate([np.asarray(xs, dtype=float) for _, xs, _ in series])
    all_y = np.concatenate([np.asarray(ys, dtype=float) for _, _, ys in series])
    finite = np.isfinite(all_y)
    if log_y:
        finite &= all_y > 0
    if not finite.any():
        raise ContractViolation("line_plot needs at least one finite point")
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_vals = np.array([ty(v) for v in all_y[finite]])
    y_lo, y_hi = float(y_vals.min()), float(y_vals.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return mt + ph - (ty(y) - y_lo) / (y_hi - y_lo) * ph

    root = _svg_root(width, height)
    ET.SubElement(root, "rect", {"x": "0", "y": "0", "width": str(width),
                                 "height": str(height), "fill": "white"})
    ET.SubElement(root, "rect", {"x": str(ml), "y": str(mt), "width": str(pw),
                                 "height": str(ph), "fill": "none", "stroke": "#999"})
    if title:
        _text(root, width / 2, mt - 10, title, size=13, anchor="middle")
    for tx in _ticks(x_lo, x_hi):
        _text(root, px(tx), height - mb + 16, _fmt_tick(tx), anchor="middle")
        ET.SubElement(root, "line", {"x1": f"{px(tx):.1f}", "y1": str(mt + ph),
                                     "x2": f"{px(tx):.1f}", "y2": str(mt + ph + 4),
                                     "stroke": "#333"})
    for tv in _ticks(y_lo, y_hi):
        yy = mt + ph - (tv - y_lo) / (y_hi - y_lo) * ph
        label = _fmt_tick(10**tv if log_y else tv)
        _text(root, ml - 6, yy + 4, label, anchor="end")
        ET.SubElement(root, "line", {"x1": str(ml - 4), "y1": f"{yy:.1f}",
                                     "x2": str(ml), "y2": f"{yy:.1f}", "stroke": "#333"})
    if x_label:
        _text(root, ml + pw / 2, height - 8, x_label, anchor="middle")
    if y_label:
        _text(root, 14, mt + 12, y_label)
    for idx, (label, xs, ys) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        keep = np.isfinite(ys)
        if log_y:
            keep &= ys > 0
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs[keep], ys[keep]))
        if pts:
            ET.SubElement(root, "polyline", {"points": pts, "fill": "none",
                                             "stroke": color, "stroke-width": "1.5"})
        ET.SubElement(root, "line", {"x1": str(ml + pw - 60), "y1": str(mt + 12 + 14 * idx),
                                     "x2": str(ml + pw - 40), "y2": str(mt + 12 + 14 * idx),
                                     "stroke": color, "stroke-width": "2"})
        _text(root, ml + pw - 36, mt + 16 + 14 * idx, label)
    ET.ElementTree(root).write(path, encoding="unicode", xml_declaration=True)


def trajectory_plot(
    path: str,
    history: np.ndarray,
    ground_truth: np.ndarray,
    samples: np.ndarray | None = None,
    title: str = "",
    width: int = 480,
    height: int = 480,
) -> None:
    """Top-down overlay: observed history, true future, sampled futures."""
    hist = np.asarray(history, dtype=float)
    gt = np.asarray(ground_truth, dtype=float)
    groups = [hist, gt]
    if samples is not None:
        samples = np.asarray(samples, dtype=float)
        groups.append(samples.reshape(-1, 2))
    allp = np.concatenate([g.reshape(-1, 2) for g in groups], axis=0)
    allp = allp[np.isfinite(allp).all(axis=1)]
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    span = max(float((hi - lo).max()), 1e-6)
    c = (lo + hi) / 2
    m = 40
    scale = (min(width, height) - 2 * m) / span

    def pt(p) -> str:
        x = width / 2 + (p[0] - c[0]) * scale
        y = height / 2 - (p[1] - c[1]) * scale
        return f"{x:.1f},{y:.1f}"

    root = _svg_root(width, height)
    ET.SubElement(root, "rect", {"x": "0", "y": "0", "width": str(width),
                                 "height": str(height), "fill": "white"})
    if title:
        _text(root, width / 2, 18, title, size=13, anchor="middle")
    if samples is not None:
        for s in samples.reshape(-1, samples.shape[-2], 2):
            keep = np.isfinite(s).all(axis=1)
            if keep.sum() < 2:
                continue
            ET.SubElement(root, "polyline", {
                "points": " ".join(pt(p) for p in s[keep]), "fill": "none",
                "stroke": "#2ca02c", "stroke-width": "1", "opacity": "0.35"})
    ET.SubElement(root, "polyline", {"points": " ".join(pt(p) for p in hist),
                                     "fill": "none", "stroke": "#1f77b4", "stroke-width": "2"})
    ET.SubElement(root, "polyline", {"points": " ".join(pt(p) for p in gt),
                                     "fill": "none", "stroke": "#d62728", "stroke-width": "2"})
    cx, cy = pt(hist[-1]).split(",")
    ET.SubElement(root, "circle", {"cx": cx, "cy": cy, "r": "3", "fill": "#1f77b4"})
    _text(root, m, height - 10, "history", size=10)
    _text(root, m + 60, height - 10, "truth", size=10)
    if samples is not None:
        _text(root, m + 105, height - 10, "samples", size=10)
    ET.ElementTree(root).write(path, encoding="unicode", xml_declaration=True)
