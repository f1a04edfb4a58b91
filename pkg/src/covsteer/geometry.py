"""Planar helpers: polygon vertices, confidence ellipses and ellipse-polygon distances."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .environment import ConvexRegion


def polygon_vertices(region: ConvexRegion, tol: float = 1e-9) -> np.ndarray:
    """Vertices of a bounded planar polytope, sorted counter-clockwise."""
    if region.dim != 2:
        raise ValueError("polygon_vertices needs a planar region")
    A = np.array([f.alpha for f in region.faces])
    b = np.array([f.beta for f in region.faces])
    pts = []
    for i, j in itertools.combinations(range(len(b)), 2):
        M = A[[i, j]]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        p = np.linalg.solve(M, b[[i, j]])
        if np.all(A @ p <= b + tol * (1 + np.abs(b))):
            if not any(np.allclose(p, q, atol=1e-9) for q in pts):
                pts.append(p)
    if not pts:
        return np.zeros((0, 2))
    P = np.array(pts)
    c = P.mean(axis=0)
    order = np.argsort(np.arctan2(P[:, 1] - c[1], P[:, 0] - c[0]))
    return P[order]


def ellipse_axes(cov2: np.ndarray, nsigma: float = 3.0) -> tuple[np.ndarray, float]:
    """Semi-axes ``nsigma * sqrt(eig)`` (descending) and the major-axis angle in degrees."""
    w, U = np.linalg.eigh(0.5 * (cov2 + cov2.T))
    w = np.clip(w[::-1], 0.0, None)
    U = U[:, ::-1]
    major = U[:, 0]
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    return nsigma * np.sqrt(w), math.degrees(math.atan2(major[1], major[0]))


def support(center: np.ndarray, cov2: np.ndarray, nsigma: float, alpha: np.ndarray) -> float:
    """``max alpha^T p`` over the ellipse ``{(p-c)^T cov^-1 (p-c) <= nsigma^2}``."""
    return float(alpha @ center + nsigma * math.sqrt(max(float(alpha @ cov2 @ alpha), 0.0)))


def mahalanobis_to_polygon(center: np.ndarray, cov2: np.ndarray, region: ConvexRegion) -> float:
    """Smallest Mahalanobis distance from ``center`` to a planar polytope.

    Zero when the centre lies inside.  Otherwise the minimiser sits on an edge,
    where the quadratic is one-dimensional and minimised in closed form.
    """
    if region.contains(center):
        return 0.0
    P = np.linalg.inv(0.5 * (cov2 + cov2.T))
    V = polygon_vertices(region)
    best = math.inf
    for a, b in zip(V, np.roll(V, -1, axis=0)):
        d = b - a
        den = float(d @ P @ d)
        t = 0.0 if den <= 0 else float(np.clip(-((a - center) @ P @ d) / den, 0.0, 1.0))
        e = a + t * d - center
        best = min(best, float(e @ P @ e))
    return math.sqrt(best)


def ellipse_clearance(center: np.ndarray, cov2: np.ndarray, nsigma: float, region: ConvexRegion) -> float:
    """Gap between the ``nsigma`` ellipse and a polytope, in standard deviations (negative means overlap)."""
    return mahalanobis_to_polygon(center, cov2, region) - nsigma
