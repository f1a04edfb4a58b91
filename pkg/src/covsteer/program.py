"""Assembly of the mixed-integer conic program for chance-constrained covariance steering.

Canonical form::

    minimize    c @ x + c0
    subject to  A @ x + s = b,   s in K_1 x K_2 x ...
                lb <= x <= ub,   x[i] in {0, 1} for i in integer

with cones ``zero``, ``nonneg``, ``soc`` (``s[0] >= ||s[1:]||``) and ``psd``
(upper triangle stacked column by column, off-diagonals scaled by sqrt(2)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .chance import deviation_map, inverse_psd_sqrt, inverse_standard_normal_cdf, noise_factor
from .dynamics import BlockOperators, assemble_block_operators
from .environment import Scenario
from .policy import CostWeights, GaussianBoundary, Policy


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class Cone:
    kind: str  # "zero" | "nonneg" | "soc" | "psd"
    dim: int  # number of rows; for "psd" the matrix side is ``side``
    label: str = ""
    side: int = 0


@dataclass
class DecisionLayout:
    N: int
    nx: int
    nu: int
    n_regions: int
    V: slice
    K: slice
    cost: slice
    norms: slice
    M: slice
    norm_keys: list = field(default_factory=list)  # (direction index, step) per norm auxiliary

    @property
    def n(self) -> int:
        return self.M.stop

    @property
    def n_binaries(self) -> int:
        return self.M.stop - self.M.start

    def binary_index(self, r: int, k: int) -> int:
        return self.M.start + r * (self.N - 1) + k

    def binary_position(self, idx: int) -> tuple[int, int]:
        """``(region, column)`` of a binary variable index."""
        off = idx - self.M.start
        return divmod(off, self.N - 1)

    def column(self, k: int) -> list[int]:
        return [self.binary_index(r, k) for r in range(self.n_regions)]

    def decode(self, x) -> tuple[Policy, np.ndarray]:
        x = np.asarray(x, dtype=float)
        policy = Policy.from_vectors(x[self.V], x[self.K], self.N, self.nu, self.nx)
        M = x[self.M].reshape(self.n_regions, self.N - 1) if self.N > 1 else np.zeros((self.n_regions, 0))
        return policy, M


@dataclass
class ConicProgram:
    c: np.ndarray
    c0: float
    A: sp.csc_matrix
    b: np.ndarray
    cones: list[Cone]
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    implied_ub: np.ndarray  # upper bounds that never bind at an optimum; not emitted as rows
    cost_terms: list = field(default_factory=list)  # (const, coeff) with cost = sum ||const + coeff @ x||^2
    gates: np.ndarray = None  # per row: binary index whose value 0 makes the row redundant, else -1
    one_hot: list = field(default_factory=list)  # groups of binaries with exactly one equal to 1

    def __post_init__(self):
        if self.gates is None:
            self.gates = np.full(self.b.size, -1, dtype=int)

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        return float(self.c @ x + self.c0)

    def cost_value(self, x) -> float:
        """Quadratic cost evaluated from the epigraph terms directly."""
        return float(sum(np.sum((k0 + k1 @ x) ** 2) for k0, k1 in self.cost_terms))

    def relaxation_is_convex(self) -> bool:
        return all(c.kind in ("zero", "nonneg", "soc", "psd") for c in self.cones)

    def cone_violation(self, x) -> float:
        """Largest cone residual of ``b - A x`` (0 when feasible)."""
        s = self.b - self.A @ x
        worst, row = 0.0, 0
        for cone in self.cones:
            blk = s[row : row + cone.dim]
            row += cone.dim
            if cone.kind == "zero":
                v = float(np.max(np.abs(blk))) if blk.size else 0.0
            elif cone.kind == "nonneg":
                v = float(max(0.0, -blk.min())) if blk.size else 0.0
            elif cone.kind == "soc":
                v = max(0.0, float(np.linalg.norm(blk[1:]) - blk[0]))
            else:
                v = max(0.0, -float(np.linalg.eigvalsh(svec_to_matrix(blk, cone.side))[0]))
            worst = max(worst, v)
        return worst

    def to_dict(self) -> dict:
        A = self.A.tocoo()
        return {
            "n_variables": int(self.n),
            "objective": {"c": self.c.tolist(), "c0": self.c0},
            "bounds": {"lb": self.lb.tolist(), "ub": self.ub.tolist()},
            "integer": self.integer.tolist(),
            "cones": [{"kind": c.kind, "dim": c.dim, "side": c.side, "label": c.label} for c in self.cones],
            "A": {"shape": list(A.shape), "row": A.row.tolist(), "col": A.col.tolist(), "val": A.data.tolist()},
            "b": self.b.tolist(),
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def svec_indices(side: int) -> list[tuple[int, int]]:
    return [(i, j) for j in range(side) for i in range(j + 1)]


def svec_to_matrix(v, side: int) -> np.ndarray:
    Z = np.zeros((side, side))
    for val, (i, j) in zip(v, svec_indices(side)):
        if i == j:
            Z[i, i] = val
        else:
            Z[i, j] = Z[j, i] = val / math.sqrt(2.0)
    return Z


def _factor(Q) -> np.ndarray:
    """``F`` with ``F.T @ F == Q`` (rows for zero eigenvalues dropped)."""
    w, U = np.linalg.eigh(0.5 * (Q + Q.T))
    if w.size and w[0] < -1e-9 * (1.0 + abs(w[-1])):
        raise ProgramError(f"weight matrix is indefinite (min eigenvalue {w[0]:.3e})")
    keep = w > 1e-14 * max(1.0, abs(w[-1]))
    return (U[:, keep] * np.sqrt(w[keep])).T


def _drop_zero_rows(const: np.ndarray, coeff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = (const != 0.0) | np.any(coeff != 0.0, axis=1)
    return const[nz], coeff[nz]


class _Rows:
    """Accumulates cone blocks ``expr = const + coeff @ x`` that must lie in a cone."""

    def __init__(self, n: int):
        self.n = n
        self.blocks: list[tuple[sp.spmatrix, np.ndarray]] = []
        self.cones: list[Cone] = []
        self.gates: list[np.ndarray] = []

    def add(self, kind: str, const, coeff, label: str = "", side: int = 0, gates=None) -> None:
        const = np.atleast_1d(np.asarray(const, dtype=float))
        coeff = sp.csr_matrix(coeff)
        if coeff.shape != (const.size, self.n):
            raise ProgramError(f"block {label!r}: coefficient shape {coeff.shape} vs {(const.size, self.n)}")
        # s = b - A x must equal const + coeff x.
        self.blocks.append((-coeff, const))
        self.cones.append(Cone(kind, const.size, label, side))
        self.gates.append(np.full(const.size, -1, dtype=int) if gates is None else np.asarray(gates, dtype=int))

    def finish(self) -> tuple[sp.csc_matrix, np.ndarray, list[Cone], np.ndarray]:
        if not self.blocks:
            return sp.csc_matrix((0, self.n)), np.zeros(0), [], np.zeros(0, dtype=int)
        A = sp.vstack([blk for blk, _ in self.blocks]).tocsc()
        b = np.concatenate([c for _, c in self.blocks])
        return A, b, list(self.cones), np.concatenate(self.gates)


def _embed(coeff_local: np.ndarray, sl: slice, n: int) -> sp.csr_matrix:
    """Place columns of a local coefficient matrix at variable slice ``sl``."""
    local = sp.csr_matrix(np.atleast_2d(coeff_local))
    m = local.shape[0]
    return sp.hstack([sp.csr_matrix((m, sl.start)), local, sp.csr_matrix((m, n - sl.stop))]).tocsr()


def _direction_key(alpha: np.ndarray) -> tuple[tuple, np.ndarray, float]:
    """Canonical unit direction of ``alpha`` (up to sign) and the signed scale."""
    norm = float(np.linalg.norm(alpha))
    d = alpha / norm
    first = np.flatnonzero(np.abs(d) > 1e-12)[0]
    sign = 1.0 if d[first] > 0 else -1.0
    d = sign * d
    return tuple(np.round(d, 12)), d, sign * norm


@dataclass
class ProgramContext:
    """Policy-independent quantities shared by all builders."""

    ops: BlockOperators
    boundary: GaussianBoundary
    L: np.ndarray
    layout: DecisionLayout

    @property
    def n(self) -> int:
        return self.layout.n


def build_cost(ctx: ProgramContext, weights: CostWeights, rows: _Rows, c: np.ndarray) -> list:
    """Epigraph form of the separated mean/covariance quadratic cost.

    Each of the (up to) four sum-of-squares terms ``||w(x)||^2`` gets an
    auxiliary ``t`` with ``||(t - 1, 2 w)|| <= t + 1``.
    """
    ops, lay, L, n = ctx.ops, ctx.layout, ctx.L, ctx.n
    N, nx, nu = ops.horizon, ops.nx, ops.nu
    mu0 = ctx.boundary.mu0
    terms = []

    # Mean state: F_k E_k (calA mu0 + calB V).
    c_parts, k_parts = [], []
    for k in range(N):
        F = _factor(weights.Q_mean[k])
        if F.size == 0:
            continue
        r = ops.rows(k)
        c_parts.append(F @ ops.calA[r] @ mu0)
        k_parts.append(_embed(F @ ops.calB[r], lay.V, n))
    if c_parts:
        terms.append(("mean_state", np.concatenate(c_parts), sp.vstack(k_parts).tocsr()))

    # Mean input: G_k v_k.
    k_parts = []
    for k in range(N):
        G = _factor(weights.R_mean[k])
        loc = np.zeros((G.shape[0], N * nu))
        loc[:, k * nu : (k + 1) * nu] = G
        k_parts.append(_embed(loc, lay.V, n))
    terms.append(("mean_input", np.zeros(sum(p.shape[0] for p in k_parts)), sp.vstack(k_parts).tocsr()))

    # Covariance state: F_k E_k (I + calB K) L.
    c_parts, k_parts = [], []
    for k in range(N):
        F = _factor(weights.Q_cov[k])
        if F.size == 0:
            continue
        const, coeff = deviation_map(ops, L, k, F)
        const, coeff = _drop_zero_rows(const.ravel(), coeff)
        c_parts.append(const)
        k_parts.append(_embed(coeff, lay.K, n))
    if c_parts:
        terms.append(("cov_state", np.concatenate(c_parts), sp.vstack(k_parts).tocsr()))

    # Covariance input: G_k K_k E_k L.
    k_parts = []
    nL = L.shape[1]
    for k in range(N):
        G = _factor(weights.R_cov[k])
        Lk = L[ops.rows(k)]
        block = np.einsum("ma,cl->mlac", G, Lk).reshape(G.shape[0] * nL, nu * nx)
        loc = np.zeros((block.shape[0], N * nu * nx))
        loc[:, k * nu * nx : (k + 1) * nu * nx] = block
        _, loc = _drop_zero_rows(np.zeros(loc.shape[0]), loc)
        k_parts.append(_embed(loc, lay.K, n))
    terms.append(("cov_input", np.zeros(sum(p.shape[0] for p in k_parts)), sp.vstack(k_parts).tocsr()))

    if len(terms) > lay.cost.stop - lay.cost.start:
        raise ProgramError("cost layout too small")
    out = []
    for i, (label, const, coeff) in enumerate(terms):
        t = lay.cost.start + i
        et = sp.csr_matrix(([1.0], ([0], [t])), shape=(1, n))
        rows.add(
            "soc",
            np.concatenate([[1.0, -1.0], 2.0 * const]),
            sp.vstack([et, et, 2.0 * coeff]),
            label=f"cost:{label}",
        )
        c[t] = 1.0
        out.append((const, coeff))
    return out


def build_terminal_mean(ctx: ProgramContext, rows: _Rows) -> None:
    ops, lay = ctx.ops, ctx.layout
    r = ops.rows(ops.horizon)
    const = ops.calA[r] @ ctx.boundary.mu0 - ctx.boundary.muN
    rows.add("zero", const, _embed(ops.calB[r], lay.V, ctx.n), label="terminal_mean")


def terminal_covariance_map(ctx: ProgramContext) -> tuple[np.ndarray, np.ndarray]:
    """Affine map ``kvec -> G(K) = SigmaN^{-1/2} E_N (I + calB K) L`` (row-major ravel)."""
    W = inverse_psd_sqrt(ctx.boundary.SigmaN)
    return deviation_map(ctx.ops, ctx.L, ctx.ops.horizon, W)


def build_terminal_covariance(ctx: ProgramContext, rows: _Rows) -> None:
    """``[[I, G(K)], [G(K)^T, I]] >= 0``, i.e. ``||G(K)||_2 <= 1``."""
    ops, lay, n = ctx.ops, ctx.layout, ctx.n
    nx = ops.nx
    const, coeff = terminal_covariance_map(ctx)
    nL = ctx.L.shape[1]
    side = nx + nL
    idx = svec_indices(side)
    vconst = np.zeros(len(idx))
    vcoeff = sp.lil_matrix((len(idx), n))
    kc = coeff  # rows: i*nL + l
    root2 = math.sqrt(2.0)
    for row, (i, j) in enumerate(idx):
        if i == j:
            vconst[row] = 1.0
        elif i < nx <= j:
            g = i * nL + (j - nx)
            vconst[row] = root2 * const.ravel()[g]
            nzc = np.flatnonzero(kc[g])
            if nzc.size:
                vcoeff[row, lay.K.start + nzc] = root2 * kc[g, nzc]
    rows.add("psd", vconst, vcoeff.tocsr(), label="terminal_covariance", side=side)


@dataclass
class RegionData:
    """Per-face bookkeeping for the gated region constraints."""

    multiplier: float
    directions: list  # unit directions
    faces: list  # (r, q, direction index, signed scale, beta) per region face


def build_region_constraints(
    ctx: ProgramContext,
    scenario: Scenario,
    rows: _Rows,
    lb: np.ndarray,
    ub: np.ndarray,
    implied: np.ndarray,
    margin: float = 0.0,
) -> RegionData:
    """Big-M gated per-face chance constraints for steps ``k`` and ``k + 1`` of each column.

    ``s[d, t] >= ||L^T (I + calB K)^T E_t^T d||`` is shared by every face with
    normal direction ``+-d``.  For face ``alpha = scale * d``::

        alpha^T E_t (calA mu0 + calB V) + z |scale| s[d, t] - beta <= bigM (1 - M[r, k])

    ``margin`` shifts every face inward by that Euclidean distance so that the
    interior-point tolerance cannot push an active tail above ``epsilon``.
    """
    ops, lay, L, n = ctx.ops, ctx.layout, ctx.L, ctx.n
    N = ops.horizon
    z = inverse_standard_normal_cdf(1.0 - scenario.epsilon)
    regions = scenario.lifted_regions
    dir_index: dict[tuple, int] = {}
    directions: list[np.ndarray] = []
    faces = []
    for r, reg in enumerate(regions):
        for q, f in enumerate(reg.faces):
            key, d, scale = _direction_key(f.alpha)
            if key not in dir_index:
                dir_index[key] = len(directions)
                directions.append(d)
            faces.append((r, q, dir_index[key], scale, f.beta - margin * float(np.linalg.norm(f.alpha))))

    k_lo, k_hi = lb[lay.K], ub[lay.K]
    v_lo, v_hi = lb[lay.V], ub[lay.V]
    steps = range(N) if N > 1 else range(0)

    # Norm auxiliaries, one per (direction, step).
    norm_var = {}
    pos = lay.norms.start
    for di, d in enumerate(directions):
        for t in steps:
            const, coeff = deviation_map(ops, L, t, d[None, :])
            const, coeff = _drop_zero_rows(const.ravel(), coeff)
            sidx = pos
            pos += 1
            lay.norm_keys.append((di, t))
            norm_var[(di, t)] = sidx
            es = sp.csr_matrix(([1.0], ([0], [sidx])), shape=(1, n))
            rows.add("soc", np.concatenate([[0.0], const]), sp.vstack([es, _embed(coeff, lay.K, n)]), label=f"norm:d{di}:t{t}")
            # Interval bound on each component of the norm argument.
            lo_c = const + np.minimum(coeff * k_lo, coeff * k_hi).sum(axis=1)
            hi_c = const + np.maximum(coeff * k_lo, coeff * k_hi).sum(axis=1)
            lb[sidx] = 0.0
            ub[sidx] = float(np.linalg.norm(np.maximum(np.abs(lo_c), np.abs(hi_c))))
            implied[sidx] = True
    if pos != lay.norms.stop:
        raise ProgramError("norm layout mismatch")

    gated_const, gated_rows, gate_of = [], [], []
    for r, q, di, scale, beta in faces:
        alpha = scale * directions[di]
        for k in range(N - 1):
            for t in (k, k + 1):
                rr = ops.rows(t)
                a_mu = float(alpha @ ops.calA[rr] @ ctx.boundary.mu0)
                a_v = alpha @ ops.calB[rr]
                sidx = norm_var[(di, t)]
                zc = z * abs(scale)
                big_m = a_mu + np.maximum(a_v * v_lo, a_v * v_hi).sum() + zc * ub[sidx] - beta
                big_m = max(big_m, 0.0)
                # a_v V + zc s + bigM M <= beta + bigM - a_mu
                row = np.zeros(n)
                row[lay.V] = a_v
                row[sidx] = zc
                row[lay.binary_index(r, k)] = big_m
                gated_rows.append(row)
                gated_const.append(beta + big_m - a_mu)
                gate_of.append(lay.binary_index(r, k))
    if gated_rows:
        G = np.array(gated_rows)
        # nonneg: (beta + bigM - a_mu) - G x >= 0
        rows.add("nonneg", np.array(gated_const), -sp.csr_matrix(G), label="region_faces", gates=gate_of)
    return RegionData(multiplier=z, directions=directions, faces=faces)


def build_assignment_constraints(layout: DecisionLayout, rows: _Rows) -> None:
    """Each time column selects exactly one region."""
    n = layout.n
    if layout.N < 2:
        return
    const = -np.ones(layout.N - 1)
    coeff = sp.lil_matrix((layout.N - 1, n))
    for k in range(layout.N - 1):
        for idx in layout.column(k):
            coeff[k, idx] = 1.0
    rows.add("zero", const, coeff.tocsr(), label="assignment")


@dataclass
class AssembledProgram:
    program: ConicProgram
    layout: DecisionLayout
    ops: BlockOperators
    region_data: RegionData
    mean_only: bool
    scenario: Scenario

    def decode(self, x) -> tuple[Policy, np.ndarray]:
        return self.layout.decode(x)


def make_layout(scenario: Scenario, n_directions: int) -> DecisionLayout:
    sys = scenario.system
    N, nx, nu = sys.horizon, sys.nx, sys.nu
    nR = len(scenario.regions)
    V = slice(0, N * nu)
    K = slice(V.stop, V.stop + N * nu * nx)
    cost = slice(K.stop, K.stop + 4)
    n_norms = n_directions * N if N > 1 else 0
    norms = slice(cost.stop, cost.stop + n_norms)
    M = slice(norms.stop, norms.stop + (nR * (N - 1) if N > 1 else 0))
    return DecisionLayout(N, nx, nu, nR, V, K, cost, norms, M)


def _count_directions(scenario: Scenario) -> int:
    keys = set()
    for reg in scenario.lifted_regions:
        for f in reg.faces:
            keys.add(_direction_key(f.alpha)[0])
    return len(keys)


FACE_MARGIN = 1e-5


def assemble(scenario: Scenario, mean_only: bool = False, face_margin: float = FACE_MARGIN) -> AssembledProgram:
    """Build the full program; ``mean_only`` fixes ``K = 0`` and drops the terminal covariance constraint."""
    bd = scenario.bounds
    if not np.all(np.isfinite([bd.v_lo, bd.v_hi, bd.k_lo, bd.k_hi])):
        raise ProgramError("V and K bounds must be finite (big-M constants derive from them)")
    ops = assemble_block_operators(scenario.system)
    layout = make_layout(scenario, _count_directions(scenario))
    n = layout.n
    ctx = ProgramContext(ops, scenario.boundary, noise_factor(ops, scenario.boundary.Sigma0), layout)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    implied = np.zeros(n, dtype=bool)
    lb[layout.V], ub[layout.V] = bd.v_lo, bd.v_hi
    if mean_only:
        lb[layout.K], ub[layout.K] = 0.0, 0.0
    else:
        lb[layout.K], ub[layout.K] = bd.k_lo, bd.k_hi
    lb[layout.M], ub[layout.M] = 0.0, 1.0

    rows = _Rows(n)
    c = np.zeros(n)
    build_terminal_mean(ctx, rows)
    build_assignment_constraints(layout, rows)
    cost_terms = build_cost(ctx, scenario.weights, rows, c)
    if not mean_only:
        build_terminal_covariance(ctx, rows)
    region_data = build_region_constraints(ctx, scenario, rows, lb, ub, implied, face_margin)

    # Cost auxiliaries: [0, interval bound of each sum of squares].
    for i, (const, coeff) in enumerate(cost_terms):
        t = layout.cost.start + i
        lb[t] = 0.0
        ub[t] = _interval_sq_norm(const, coeff, lb, ub)
        implied[t] = True
    unused = [layout.cost.start + i for i in range(len(cost_terms), 4)]
    lb[unused], ub[unused] = 0.0, 0.0

    if not np.all(np.isfinite(lb)) or not np.all(np.isfinite(ub)):
        raise ProgramError("every variable needs finite bounds (big-M would be unbounded)")

    A, b, cones, gates = rows.finish()
    program = ConicProgram(
        c=c,
        c0=0.0,
        A=A,
        b=b,
        cones=cones,
        lb=lb,
        ub=ub,
        integer=np.arange(layout.M.start, layout.M.stop),
        implied_ub=implied,
        cost_terms=cost_terms,
        gates=gates,
        one_hot=[layout.column(k) for k in range(layout.N - 1)],
    )
    return AssembledProgram(program, layout, ops, region_data, mean_only, scenario)


def _interval_sq_norm(const, coeff, lb, ub) -> float:
    coeff = sp.csr_matrix(coeff)
    pos = coeff.maximum(0)
    neg = coeff.minimum(0)
    lb0 = np.where(np.isfinite(lb), lb, 0.0)
    ub0 = np.where(np.isfinite(ub), ub, 0.0)
    hi = const + pos @ ub0 + neg @ lb0
    lo = const + pos @ lb0 + neg @ ub0
    return float(np.sum(np.maximum(np.abs(lo), np.abs(hi)) ** 2))
