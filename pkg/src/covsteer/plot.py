"""Deterministic SVG rendering of a solved scenario."""

from __future__ import annotations

import numpy as np

from .environment import Scenario
from .geometry import ellipse_axes, polygon_vertices

WIDTH = 800.0
PAD = 0.05
PALETTE = {
    "background": "#ffffff",
    "domain": "#000000",
    "obstacle": "#7f7f7f",
    "region": "#1f77b4",
    "mean": "#2ca02c",
    "ellipse": "#9467bd",
    "initial": "#d62728",
    "terminal": "#ff7f0e",
}


def _f(x: float) -> str:
    s = f"{x:.3f}"
    return "0.000" if s == "-0.000" else s


def position_blocks(scenario: Scenario, means: np.ndarray, covs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dims = list(scenario.position_dims)
    return np.asarray(means)[:, dims], np.asarray(covs)[:, dims][:, :, dims]


def render_svg(scenario: Scenario, means: np.ndarray, covs: np.ndarray, nsigma: float = 3.0, title: str = "") -> str:
    """Return SVG text for the mean path and per-step ``nsigma`` ellipses.

    ``means`` is ``(N+1, nx)`` and ``covs`` is ``(N+1, nx, nx)``; only the
    position components are drawn.
    """
    if len(scenario.position_dims) != 2:
        raise ValueError("plotting needs exactly two position dimensions")
    if covs is None or len(covs) == 0:
        raise ValueError("missing covariance data")
    mu, S = position_blocks(scenario, means, covs)
    bnd = scenario.boundary
    dims = list(scenario.position_dims)
    target_mu = bnd.muN[dims]
    target_S = bnd.SigmaN[np.ix_(dims, dims)]

    ellipses = [(mu[k], *ellipse_axes(S[k], nsigma)) for k in range(len(mu))]
    target = (target_mu, *ellipse_axes(target_S, nsigma))

    dom = polygon_vertices(scenario.domain)
    lo, hi = dom.min(axis=0), dom.max(axis=0)
    for c, radii, _ in ellipses + [target]:
        lo = np.minimum(lo, c - radii[0])
        hi = np.maximum(hi, c + radii[0])
    span = hi - lo
    lo, hi = lo - PAD * span, hi + PAD * span
    scale = WIDTH / (hi[0] - lo[0])
    height = (hi[1] - lo[1]) * scale

    def px(p):
        return (p[0] - lo[0]) * scale, (hi[1] - p[1]) * scale

    def poly(V):
        return " ".join(f"{_f(x)},{_f(y)}" for x, y in (px(v) for v in V))

    def ellipse(c, radii, angle, color, width):
        x, y = px(c)
        return (
            f'<ellipse cx="{_f(x)}" cy="{_f(y)}" rx="{_f(radii[0] * scale)}" ry="{_f(radii[1] * scale)}" '
            f'transform="rotate({_f(-angle)} {_f(x)} {_f(y)})" fill="none" stroke="{color}" stroke-width="{width}"/>'
        )

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(WIDTH)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(WIDTH)} {_f(height)}">',
        f'<rect x="0" y="0" width="{_f(WIDTH)}" height="{_f(height)}" fill="{PALETTE["background"]}"/>',
    ]
    if title:
        out.append(f'<title>{title}</title>')
    out.append(f'<polygon points="{poly(dom)}" fill="none" stroke="{PALETTE["domain"]}" stroke-width="2"/>')
    for o in scenario.obstacles:
        out.append(f'<polygon points="{poly(polygon_vertices(o))}" fill="{PALETTE["obstacle"]}" stroke="none"/>')
    for r in scenario.regions:
        out.append(
            f'<polygon points="{poly(polygon_vertices(r))}" fill="none" stroke="{PALETTE["region"]}" '
            f'stroke-width="1" stroke-dasharray="4 3"/>'
        )
    for k, (c, radii, angle) in enumerate(ellipses[1:], start=1):
        out.append(ellipse(c, radii, angle, PALETTE["ellipse"], 1))
    out.append(ellipse(*ellipses[0], PALETTE["initial"], 2))
    out.append(ellipse(*target, PALETTE["terminal"], 2))
    out.append(f'<polyline points="{poly(mu)}" fill="none" stroke="{PALETTE["mean"]}" stroke-width="2"/>')
    for p in mu:
        x, y = px(p)
        out.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="2" fill="{PALETTE["mean"]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
