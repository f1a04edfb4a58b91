"""Obstacle fields, convex free-space decompositions and scenario files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np
from scipy.optimize import linprog

from .chance import NotPSDError
from .dynamics import LinearSystemSchedule, double_integrator_2d
from .policy import CostWeights, GaussianBoundary


class ScenarioError(ValueError):
    """Scenario document failed schema or invariant checks."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class Halfspace:
    """``{x : alpha @ x <= beta}``."""

    alpha: np.ndarray
    beta: float

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        if not np.any(alpha):
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", float(self.beta))

    def lift(self, nx: int, dims: Sequence[int]) -> "Halfspace":
        """Zero-pad the normal from position coordinates ``dims`` to the full state."""
        a = np.zeros(nx)
        a[list(dims)] = self.alpha
        return Halfspace(a, self.beta)


def _face_arrays(faces: Sequence[Halfspace]) -> tuple[np.ndarray, np.ndarray]:
    return np.array([f.alpha for f in faces]), np.array([f.beta for f in faces])


def chebyshev_center(faces: Sequence[Halfspace], cap: float = 1e6) -> tuple[np.ndarray, float]:
    """Center and radius of the largest ball inside the polytope (radius < 0 if empty)."""
    G, h = _face_arrays(faces)
    n = G.shape[1]
    norms = np.linalg.norm(G, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([G, norms[:, None]])
    bounds = [(None, None)] * n + [(None, cap)]
    res = linprog(c, A_ub=A_ub, b_ub=h, bounds=bounds, method="highs")
    if res.status == 2:
        return np.full(n, np.nan), -np.inf
    if res.status != 0:
        raise DecompositionError(f"Chebyshev-center LP failed: {res.message}")
    return res.x[:n], float(res.x[-1])


@dataclass(frozen=True)
class ConvexRegion:
    id: str
    faces: tuple[Halfspace, ...]
    certificate: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        faces = tuple(self.faces)
        if not faces:
            raise ValueError(f"region {self.id!r} has no faces")
        object.__setattr__(self, "faces", faces)
        if self.certificate is None:
            center, radius = chebyshev_center(faces)
            if not radius >= 0.0:
                raise ScenarioError(f"region {self.id!r} is empty")
            object.__setattr__(self, "certificate", center)

    @property
    def dim(self) -> int:
        return self.faces[0].alpha.size

    def contains(self, point, tol: float = 0.0) -> bool:
        return contains(self, point, tol)

    def interior_contains(self, point) -> bool:
        G, h = _face_arrays(self.faces)
        return bool(np.all(G @ np.asarray(point, dtype=float) < h))

    def lift(self, nx: int, dims: Sequence[int]) -> "ConvexRegion":
        cert = np.zeros(nx)
        cert[list(dims)] = self.certificate
        return ConvexRegion(self.id, tuple(f.lift(nx, dims) for f in self.faces), cert)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        G, h = _face_arrays(self.faces)
        n = G.shape[1]
        lo, hi = np.empty(n), np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            for sign, out in ((1.0, lo), (-1.0, hi)):
                res = linprog(sign * e, A_ub=G, b_ub=h, bounds=[(None, None)] * n, method="highs")
                if res.status != 0:
                    raise DecompositionError(f"region {self.id!r} is unbounded along axis {i}")
                out[i] = res.x[i]
        return lo, hi


# Obstacles are bounded convex polytopes with the same representation.
Obstacle = ConvexRegion


def contains(region: ConvexRegion, point, tol: float = 0.0) -> bool:
    """True iff every face inequality holds (closed region)."""
    p = np.asarray(point, dtype=float).ravel()
    if p.size != region.dim:
        raise ValueError(f"point has dimension {p.size}, region has {region.dim}")
    return all(float(f.alpha @ p) <= f.beta + tol for f in region.faces)


def contains_many(region: ConvexRegion, points: np.ndarray) -> np.ndarray:
    G, h = _face_arrays(region.faces)
    return np.all(points @ G.T <= h, axis=-1)


def interior_many(region: ConvexRegion, points: np.ndarray) -> np.ndarray:
    G, h = _face_arrays(region.faces)
    return np.all(points @ G.T < h, axis=-1)


@dataclass(frozen=True)
class Bounds:
    v_lo: float
    v_hi: float
    k_lo: float
    k_hi: float


@dataclass(frozen=True)
class Scenario:
    name: str
    system: LinearSystemSchedule
    boundary: GaussianBoundary
    weights: CostWeights
    domain: ConvexRegion
    obstacles: tuple[ConvexRegion, ...]
    regions: tuple[ConvexRegion, ...]
    epsilon: float
    bounds: Bounds
    position_dims: tuple[int, ...]
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def horizon(self) -> int:
        return self.system.horizon

    @property
    def lifted_regions(self) -> tuple[ConvexRegion, ...]:
        nx = self.system.nx
        return tuple(r.lift(nx, self.position_dims) for r in self.regions)

    def position(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states)[..., list(self.position_dims)]

    def with_changes(self, **changes) -> "Scenario":
        from dataclasses import replace

        return replace(self, **changes)


_FACES = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["alpha", "beta"],
        "properties": {
            "alpha": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            "beta": {"type": "number"},
        },
    },
}
_POLY = {
    "oneOf": [
        _FACES,
        {
            "type": "object",
            "required": ["faces"],
            "properties": {"id": {"type": "string"}, "faces": _FACES},
        },
    ]
}
_MATRIX = {
    "type": "array",
    "minItems": 1,
    "oneOf": [
        {"items": {"type": "number"}},
        {"items": {"type": "array", "items": {"type": "number"}}},
    ],
}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["system", "boundary", "weights", "epsilon", "bounds", "domain", "regions", "position_dims"],
    "properties": {
        "name": {"type": "string"},
        "system": {
            "type": "object",
            "required": ["horizon"],
            "properties": {
                "preset": {"enum": ["double_integrator_2d"]},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "integer", "minimum": 1},
                "noise_scale": {"type": "number", "minimum": 0},
                "A": _MATRIX,
                "B": _MATRIX,
                "D": _MATRIX,
            },
        },
        "boundary": {
            "type": "object",
            "required": ["mu0", "Sigma0", "muN", "SigmaN"],
            "properties": {
                "mu0": {"type": "array", "items": {"type": "number"}},
                "muN": {"type": "array", "items": {"type": "number"}},
                "Sigma0": _MATRIX,
                "SigmaN": _MATRIX,
            },
        },
        "weights": {
            "type": "object",
            "required": ["Q_mean", "R_mean", "Q_cov", "R_cov"],
            "properties": {k: _MATRIX for k in ("Q_mean", "R_mean", "Q_cov", "R_cov")},
        },
        "epsilon": {"type": "number"},
        "bounds": {
            "type": "object",
            "required": ["v_lo", "v_hi", "k_lo", "k_hi"],
            "properties": {k: {"type": "number"} for k in ("v_lo", "v_hi", "k_lo", "k_hi")},
        },
        "domain": _POLY,
        "obstacles": {"type": "array", "items": _POLY},
        "regions": {"type": "array", "minItems": 1, "items": _POLY},
        "position_dims": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    },
}


def _matrix(value, name: str) -> np.ndarray:
    """Diagonal given as a flat list, or a full row-major matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        return np.diag(arr)
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        return arr
    raise ScenarioError(f"expected a diagonal or square matrix, got shape {arr.shape}", name)


def _polytope(doc, default_id: str, path: str, dim: int) -> ConvexRegion:
    if isinstance(doc, dict):
        rid, faces_doc = doc.get("id", default_id), doc["faces"]
    else:
        rid, faces_doc = default_id, doc
    faces = []
    for q, f in enumerate(faces_doc):
        if len(f["alpha"]) != dim:
            raise ScenarioError(f"alpha has length {len(f['alpha'])}, expected {dim}", f"{path}/faces/{q}/alpha")
        try:
            faces.append(Halfspace(f["alpha"], f["beta"]))
        except ValueError as exc:
            raise ScenarioError(str(exc), f"{path}/faces/{q}") from None
    try:
        return ConvexRegion(rid, tuple(faces))
    except ScenarioError as exc:
        raise ScenarioError(str(exc), path) from None


def _system(doc) -> LinearSystemSchedule:
    N = doc["horizon"]
    if doc.get("preset") == "double_integrator_2d":
        if "dt" not in doc:
            raise ScenarioError("preset double_integrator_2d requires dt", "system/dt")
        return double_integrator_2d(doc["dt"], N, doc.get("noise_scale", 1e-2))
    missing = [k for k in ("A", "B", "D") if k not in doc]
    if missing:
        raise ScenarioError(f"missing matrices {missing} (or a preset)", "system")
    try:
        return LinearSystemSchedule.time_invariant(
            np.asarray(doc["A"], dtype=float), np.asarray(doc["B"], dtype=float), np.asarray(doc["D"], dtype=float), N
        )
    except ValueError as exc:
        raise ScenarioError(str(exc), "system") from None


def parse_scenario(doc: dict) -> Scenario:
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ScenarioError(exc.message, path or "<root>") from None

    system = _system(doc["system"])
    N, nx, nu = system.horizon, system.nx, system.nu

    eps = float(doc["epsilon"])
    if not 0.0 < eps < 0.5:
        raise ScenarioError(f"threshold out of range: epsilon={eps} must satisfy 0 < epsilon < 0.5", "epsilon")

    b = doc["boundary"]
    try:
        boundary = GaussianBoundary(
            np.asarray(b["mu0"], dtype=float),
            _matrix(b["Sigma0"], "boundary/Sigma0"),
            np.asarray(b["muN"], dtype=float),
            _matrix(b["SigmaN"], "boundary/SigmaN"),
        )
    except (ValueError, NotPSDError) as exc:
        raise ScenarioError(str(exc), "boundary") from None
    if boundary.mu0.size != nx:
        raise ScenarioError(f"mu0 has length {boundary.mu0.size}, expected {nx}", "boundary/mu0")

    w = doc["weights"]
    try:
        weights = CostWeights.uniform(
            _matrix(w["Q_mean"], "weights/Q_mean"),
            _matrix(w["R_mean"], "weights/R_mean"),
            N,
            Q_cov=_matrix(w["Q_cov"], "weights/Q_cov"),
            R_cov=_matrix(w["R_cov"], "weights/R_cov"),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc), "weights") from None
    if weights.Q_mean[0].shape != (nx, nx) or weights.R_mean[0].shape != (nu, nu):
        raise ScenarioError("weight dimensions do not match the system", "weights")

    bd = doc["bounds"]
    bounds = Bounds(float(bd["v_lo"]), float(bd["v_hi"]), float(bd["k_lo"]), float(bd["k_hi"]))
    if not bounds.v_lo < bounds.v_hi:
        raise ScenarioError("v_lo must be below v_hi", "bounds")
    if not bounds.k_lo < bounds.k_hi:
        raise ScenarioError("k_lo must be below k_hi", "bounds")

    dims = tuple(doc["position_dims"])
    if len(set(dims)) != len(dims) or max(dims) >= nx:
        raise ScenarioError(f"position_dims {list(dims)} invalid for state dimension {nx}", "position_dims")
    pdim = len(dims)

    domain = _polytope(doc["domain"], "domain", "domain", pdim)
    obstacles = tuple(
        _polytope(o, f"obstacle{j}", f"obstacles/{j}", pdim) for j, o in enumerate(doc.get("obstacles", []))
    )
    regions = tuple(_polytope(r, f"region{i}", f"regions/{i}", pdim) for i, r in enumerate(doc["regions"]))
    for i, r in enumerate(regions):
        if not contains(domain, r.certificate, tol=1e-9):
            raise ScenarioError(f"region {r.id!r} certificate point lies outside the domain", f"regions/{i}")
        for o in obstacles:
            if o.interior_contains(r.certificate):
                raise ScenarioError(f"region {r.id!r} certificate point lies inside obstacle {o.id!r}", f"regions/{i}")
    for j, o in enumerate(obstacles):
        try:
            o.bounding_box()
        except DecompositionError as exc:
            raise ScenarioError(str(exc), f"obstacles/{j}") from None

    return Scenario(
        name=doc.get("name", "scenario"),
        system=system,
        boundary=boundary,
        weights=weights,
        domain=domain,
        obstacles=obstacles,
        regions=regions,
        epsilon=eps,
        bounds=bounds,
        position_dims=dims,
        source=doc,
    )


def load_scenario(source) -> Scenario:
    """Load a scenario from a path, a JSON string, or an already-parsed dict."""
    if isinstance(source, dict):
        return parse_scenario(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc}") from None
    return parse_scenario(doc)


def builtin_scenario_path(name: str) -> Path:
    path = Path(__file__).parent / "scenarios" / (name if name.endswith(".json") else f"{name}.json")
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def builtin_scenario(name: str) -> Scenario:
    return load_scenario(builtin_scenario_path(name))


@dataclass
class DecompositionReport:
    conflicts: list[tuple[str, str, float]]  # (region, obstacle, chebyshev radius of the overlap)
    certificates: dict[tuple[str, str], float]
    coverage: float
    samples: int
    threshold: float

    @property
    def ok(self) -> bool:
        return not self.conflicts and self.coverage >= self.threshold

    def to_dict(self) -> dict:
        return {
            "conflicts": [list(c) for c in self.conflicts],
            "certificates": [{"region": r, "obstacle": o, "overlap_radius": v} for (r, o), v in self.certificates.items()],
            "coverage": self.coverage,
            "samples": self.samples,
            "threshold": self.threshold,
            "ok": self.ok,
        }


def validate_decomposition(
    scenario: Scenario,
    samples: int = 100_000,
    threshold: float = 0.99,
    seed: int = 0,
    raise_on_conflict: bool = True,
    tol: float = 1e-9,
) -> DecompositionReport:
    """Check that no region overlaps an obstacle and estimate free-space coverage.

    A region and an obstacle conflict when their intersection has nonempty
    interior (largest inscribed ball radius above ``tol``); shared boundaries
    are allowed.
    """
    certificates: dict[tuple[str, str], float] = {}
    conflicts = []
    for r in scenario.regions:
        for o in scenario.obstacles:
            _, radius = chebyshev_center(r.faces + o.faces)
            certificates[(r.id, o.id)] = radius
            if radius > tol:
                conflicts.append((r.id, o.id, radius))
    if conflicts and raise_on_conflict:
        desc = ", ".join(f"{r} overlaps {o} (inscribed radius {v:.3g})" for r, o, v in conflicts)
        raise DecompositionError(f"regions intersect obstacles: {desc}")

    rng = np.random.default_rng(seed)
    lo, hi = scenario.domain.bounding_box()
    free = np.empty((0, lo.size))
    # Rejection sampling from domain minus obstacles.
    while free.shape[0] < samples:
        batch = rng.uniform(lo, hi, size=(max(samples, 1024), lo.size))
        keep = contains_many(scenario.domain, batch)
        for o in scenario.obstacles:
            keep &= ~interior_many(o, batch)
        free = np.vstack([free, batch[keep]])
    free = free[:samples]
    covered = np.zeros(samples, dtype=bool)
    for r in scenario.regions:
        covered |= contains_many(r, free)
    return DecompositionReport(conflicts, certificates, float(covered.mean()) if samples else 1.0, samples, threshold)
