"""Branch-and-bound over region binaries with a convex conic backend for relaxations."""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import clarabel
import numpy as np
import scipy.sparse as sp

from .program import AssembledProgram, ConicProgram
from .policy import Policy

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"
LIMIT_EXCEEDED = "limit_exceeded"


@dataclass
class BackendResult:
    status: str
    x: Optional[np.ndarray] = None
    objective: float = np.inf
    iterations: int = 0
    solve_time: float = 0.0


class ConicBackend:
    """Solves the continuous relaxation of a ``ConicProgram`` under given variable bounds."""

    supports_nonneg = True
    supports_soc = True
    supports_psd = True
    tolerance = 1e-8

    def solve(self, program: ConicProgram, lb: np.ndarray, ub: np.ndarray, tighten: bool = False) -> BackendResult:
        raise NotImplementedError

    def check_capabilities(self, program: ConicProgram) -> None:
        need = {c.kind for c in program.cones}
        have = {"zero"}
        if self.supports_nonneg:
            have.add("nonneg")
        if self.supports_soc:
            have.add("soc")
        if self.supports_psd:
            have.add("psd")
        if need - have:
            raise ValueError(f"backend lacks cone support for {sorted(need - have)}")


_CLARABEL_STATUS = {
    "Solved": OPTIMAL,
    "AlmostSolved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostDualInfeasible": UNBOUNDED,
}


class ClarabelBackend(ConicBackend):
    """Interior-point backend built on the Clarabel solver."""

    def __init__(self, tolerance: float = 1e-8, max_iter: int = 200):
        self.tolerance = tolerance
        self.max_iter = max_iter

    def _settings(self, tighten: bool) -> "clarabel.DefaultSettings":
        s = clarabel.DefaultSettings()
        s.verbose = False
        tol = self.tolerance * (1e-1 if tighten else 1.0)
        s.tol_gap_abs = tol
        s.tol_gap_rel = tol
        s.tol_feas = tol
        s.max_iter = self.max_iter * (2 if tighten else 1)
        if tighten:
            # Equilibration and static regularization can mask infeasibility
            # certificates on nodes with tight gated constraints.
            s.equilibrate_enable = False
            s.static_regularization_enable = False
        return s

    def solve(self, program: ConicProgram, lb: np.ndarray, ub: np.ndarray, tighten: bool = False) -> BackendResult:
        self.check_capabilities(program)
        n = program.n
        fixed = lb == ub
        # Rows gated by a binary fixed at zero are redundant; drop them.
        keep_row = np.ones(program.b.size, dtype=bool)
        gated = program.gates >= 0
        if gated.any():
            gate_vals = np.where(gated, program.gates, 0)
            keep_row[gated] = ~(fixed[gate_vals[gated]] & (ub[gate_vals[gated]] == 0.0))

        A_parts, b_parts, cones = [], [], []
        fidx = np.flatnonzero(fixed)
        if fidx.size:
            A_parts.append(sp.csr_matrix((np.ones(fidx.size), (np.arange(fidx.size), fidx)), shape=(fidx.size, n)))
            b_parts.append(lb[fidx])
            cones.append(clarabel.ZeroConeT(fidx.size))

        A = program.A.tocsr()
        row = 0
        pending_nonneg_A, pending_nonneg_b = [], []
        for cone in program.cones:
            sl = slice(row, row + cone.dim)
            row += cone.dim
            if cone.kind == "nonneg":
                mask = keep_row[sl]
                if mask.any():
                    pending_nonneg_A.append(A[sl][mask])
                    pending_nonneg_b.append(program.b[sl][mask])
                continue
            A_parts.append(A[sl])
            b_parts.append(program.b[sl])
            if cone.kind == "zero":
                cones.append(clarabel.ZeroConeT(cone.dim))
            elif cone.kind == "soc":
                cones.append(clarabel.SecondOrderConeT(cone.dim))
            elif cone.kind == "psd":
                cones.append(clarabel.PSDTriangleConeT(cone.side))
            else:
                raise ValueError(f"unknown cone {cone.kind!r}")

        free = ~fixed
        lo_idx = np.flatnonzero(free & np.isfinite(lb))
        hi_idx = np.flatnonzero(free & np.isfinite(ub) & ~program.implied_ub)
        if lo_idx.size:
            pending_nonneg_A.append(sp.csr_matrix((-np.ones(lo_idx.size), (np.arange(lo_idx.size), lo_idx)), shape=(lo_idx.size, n)))
            pending_nonneg_b.append(-lb[lo_idx])
        if hi_idx.size:
            pending_nonneg_A.append(sp.csr_matrix((np.ones(hi_idx.size), (np.arange(hi_idx.size), hi_idx)), shape=(hi_idx.size, n)))
            pending_nonneg_b.append(ub[hi_idx])
        if pending_nonneg_A:
            Anon = sp.vstack(pending_nonneg_A)
            A_parts.append(Anon)
            b_parts.append(np.concatenate(pending_nonneg_b))
            cones.append(clarabel.NonnegativeConeT(Anon.shape[0]))

        Afull = sp.vstack(A_parts).tocsc()
        bfull = np.concatenate(b_parts)
        P = sp.csc_matrix((n, n))
        t0 = time.perf_counter()
        try:
            sol = clarabel.DefaultSolver(P, program.c, Afull, bfull, cones, self._settings(tighten)).solve()
        except Exception as exc:  # backend errors surface as numerical failures
            log.warning("backend raised %s", exc)
            return BackendResult(NUMERICAL_FAILURE, solve_time=time.perf_counter() - t0)
        status = _CLARABEL_STATUS.get(str(sol.status), NUMERICAL_FAILURE)
        elapsed = time.perf_counter() - t0
        if status != OPTIMAL:
            return BackendResult(status, iterations=sol.iterations, solve_time=elapsed)
        x = np.array(sol.x)
        x[fidx] = lb[fidx]
        return BackendResult(OPTIMAL, x, program.objective(x), sol.iterations, elapsed)


@dataclass
class BnBNode:
    fixed0: frozenset
    fixed1: frozenset
    bound: float
    depth: int
    node_id: int = 0

    def free(self, binaries) -> list[int]:
        return [i for i in binaries if i not in self.fixed0 and i not in self.fixed1]


def propagate(node: BnBNode, groups: list[list[int]]) -> Optional[BnBNode]:
    """Apply exactly-one-per-group logic; ``None`` if the node becomes infeasible."""
    f0, f1 = set(node.fixed0), set(node.fixed1)
    if f0 & f1:
        return None
    changed = True
    while changed:
        changed = False
        for g in groups:
            ones = [i for i in g if i in f1]
            if len(ones) > 1:
                return None
            if ones:
                for i in g:
                    if i != ones[0] and i not in f0:
                        f0.add(i)
                        changed = True
                continue
            open_ = [i for i in g if i not in f0]
            if not open_:
                return None
            if len(open_) == 1:
                f1.add(open_[0])
                changed = True
    return BnBNode(frozenset(f0), frozenset(f1), node.bound, node.depth, node.node_id)


def node_bounds(program: ConicProgram, node: BnBNode) -> tuple[np.ndarray, np.ndarray]:
    lb, ub = program.lb.copy(), program.ub.copy()
    if node.fixed0:
        idx = np.fromiter(node.fixed0, int)
        lb[idx] = ub[idx] = 0.0
    if node.fixed1:
        idx = np.fromiter(node.fixed1, int)
        lb[idx] = ub[idx] = 1.0
    return lb, ub


def solve_relaxation(program: ConicProgram, node: BnBNode, backend: ConicBackend) -> BackendResult:
    lb, ub = node_bounds(program, node)
    res = backend.solve(program, lb, ub)
    if res.status == NUMERICAL_FAILURE:
        log.info("node %d: numerical failure, retrying with tightened tolerance", node.node_id)
        res = backend.solve(program, lb, ub, tighten=True)
    return res


def _group_position(groups: list[list[int]]) -> dict[int, tuple[int, int]]:
    return {idx: (col, pos) for col, g in enumerate(groups) for pos, idx in enumerate(g)}


def branch(node: BnBNode, x: np.ndarray, program: ConicProgram, int_tol: float = 1e-6) -> tuple[BnBNode, BnBNode]:
    """Split on the most fractional binary; returns ``(up_child, down_child)``.

    Ties are broken by earliest group (time column) and then lowest position
    (region index).  Children are propagated; an infeasible child is ``None``.
    """
    groups = program.one_hot
    pos = _group_position(groups)
    candidates = []
    for i in program.integer:
        if i in node.fixed0 or i in node.fixed1:
            continue
        frac = abs(x[i] - round(x[i]))
        if frac > int_tol:
            col, reg = pos.get(int(i), (len(groups), int(i)))
            candidates.append((round(abs(x[i] - 0.5), 12), col, reg, int(i)))
    if not candidates:
        raise ValueError("branch called on an integral node")
    _, _, _, j = min(candidates)
    up = propagate(BnBNode(node.fixed0, node.fixed1 | {j}, node.bound, node.depth + 1), groups)
    down = propagate(BnBNode(node.fixed0 | {j}, node.fixed1, node.bound, node.depth + 1), groups)
    return up, down


@dataclass
class SolveOptions:
    gap_tol: float = 1e-6
    node_limit: int = 100_000
    time_limit: float = 3600.0
    search: str = "best"  # "best" | "depth"
    workers: int = 1
    int_tol: float = 1e-6


@dataclass
class SolveResult:
    status: str
    objective: float = np.inf
    bound: float = -np.inf
    gap: float = np.inf
    nodes: int = 0
    wall_time: float = 0.0
    x: Optional[np.ndarray] = None
    policy: Optional[Policy] = None
    schedule: Optional[np.ndarray] = None  # integer (N_R, N-1)
    history: list = field(default_factory=list)  # (node_id, depth, bound or None)

    @property
    def region_sequence(self) -> list[int]:
        if self.schedule is None:
            return []
        return [int(np.argmax(self.schedule[:, k])) for k in range(self.schedule.shape[1])]


def relative_gap(incumbent: float, bound: float) -> float:
    if not np.isfinite(incumbent):
        return np.inf
    if bound >= incumbent:
        return 0.0
    return (incumbent - bound) / max(abs(incumbent), 1e-9)


class BranchAndBound:
    def __init__(self, program: ConicProgram, backend: Optional[ConicBackend] = None, options: Optional[SolveOptions] = None):
        self.program = program
        self.backend = backend or ClarabelBackend()
        self.options = options or SolveOptions()
        if self.options.search not in ("best", "depth"):
            raise ValueError(f"unknown search order {self.options.search!r}")

    def _is_integral(self, x: np.ndarray, node: BnBNode) -> bool:
        free = [i for i in self.program.integer if i not in node.fixed0 and i not in node.fixed1]
        xi = x[free]
        return bool(np.all(np.abs(xi - np.round(xi)) <= self.options.int_tol))

    def _leaf(self, node: BnBNode, x: np.ndarray) -> Optional[BackendResult]:
        """Re-solve with every binary fixed at its rounded value."""
        rounded = np.round(x[self.program.integer]).astype(int)
        ones = {int(i) for i, v in zip(self.program.integer, rounded) if v == 1}
        zeros = {int(i) for i, v in zip(self.program.integer, rounded) if v == 0}
        if ones == set(node.fixed1) and zeros == set(node.fixed0):
            return None
        leaf = propagate(BnBNode(frozenset(zeros), frozenset(ones), node.bound, node.depth), self.program.one_hot)
        if leaf is None:
            return BackendResult(INFEASIBLE)
        return solve_relaxation(self.program, leaf, self.backend)

    def run(self) -> SolveResult:
        opts = self.options
        prog = self.program
        start = time.perf_counter()
        counter = itertools.count()
        root = propagate(BnBNode(frozenset(), frozenset(), -np.inf, 0, next(counter)), prog.one_hot)
        result = SolveResult(INFEASIBLE)
        if root is None:
            result.wall_time = time.perf_counter() - start
            return result

        incumbent_val, incumbent_x = np.inf, None
        heap: list = []
        stack: list = []

        def push(node: BnBNode):
            if opts.search == "best":
                heapq.heappush(heap, (node.bound, node.node_id, node))
            else:
                stack.append(node)

        def pop() -> BnBNode:
            return heapq.heappop(heap)[2] if opts.search == "best" else stack.pop()

        def pending() -> int:
            return len(heap) if opts.search == "best" else len(stack)

        def open_bound() -> float:
            if opts.search == "best":
                return heap[0][0] if heap else np.inf
            return min((n.bound for n in stack), default=np.inf)

        push(root)
        nodes = 0
        limit_hit = False
        pool = ThreadPoolExecutor(max_workers=opts.workers) if opts.workers > 1 else None
        try:
            while pending():
                if nodes >= opts.node_limit or time.perf_counter() - start > opts.time_limit:
                    limit_hit = True
                    break
                best_open = min(open_bound(), incumbent_val)
                if relative_gap(incumbent_val, best_open) <= opts.gap_tol and incumbent_x is not None:
                    break
                batch = []
                while pending() and len(batch) < max(1, opts.workers):
                    node = pop()
                    if node.bound >= incumbent_val - opts.gap_tol * max(abs(incumbent_val), 1e-9):
                        continue
                    batch.append(node)
                if not batch:
                    continue
                if pool is not None:
                    results = list(pool.map(lambda nd: solve_relaxation(prog, nd, self.backend), batch))
                else:
                    results = [solve_relaxation(prog, nd, self.backend) for nd in batch]
                for node, res in zip(batch, results):
                    nodes += 1
                    if res.status != OPTIMAL:
                        if res.status == NUMERICAL_FAILURE:
                            log.warning("node %d: numerical failure after retry; pruned", node.node_id)
                        result.history.append((node.node_id, node.depth, None))
                        continue
                    bound = max(res.objective, node.bound)
                    result.history.append((node.node_id, node.depth, res.objective))
                    if bound >= incumbent_val - opts.gap_tol * max(abs(incumbent_val), 1e-9):
                        continue
                    if self._is_integral(res.x, node):
                        leaf = self._leaf(node, res.x)
                        if leaf is None:
                            cand_val, cand_x = res.objective, res.x
                        elif leaf.status == OPTIMAL:
                            cand_val, cand_x = leaf.objective, leaf.x
                        else:
                            continue
                        if cand_val < incumbent_val:
                            incumbent_val, incumbent_x = cand_val, cand_x
                            log.info("node %d: incumbent %.6g", node.node_id, cand_val)
                        continue
                    up, down = branch(node, res.x, prog, opts.int_tol)
                    children = [c for c in (up, down) if c is not None]
                    if opts.search == "depth":
                        # The up child (binary fixed to one) is pushed last, so it is explored first.
                        children.reverse()
                    for child in children:
                        child.bound = bound
                        child.node_id = next(counter)
                        push(child)
        finally:
            if pool is not None:
                pool.shutdown()

        result.nodes = nodes
        result.wall_time = time.perf_counter() - start
        best_open = open_bound() if pending() else np.inf
        result.bound = min(best_open, incumbent_val)
        if incumbent_x is None:
            result.status = LIMIT_EXCEEDED if limit_hit else INFEASIBLE
            return result
        result.objective = incumbent_val
        result.x = incumbent_x
        result.gap = relative_gap(incumbent_val, result.bound)
        result.status = OPTIMAL if result.gap <= opts.gap_tol else LIMIT_EXCEEDED
        return result


def solve(assembled: AssembledProgram, options: Optional[SolveOptions] = None, backend: Optional[ConicBackend] = None) -> SolveResult:
    """Solve an assembled program and decode the incumbent policy and region schedule."""
    res = BranchAndBound(assembled.program, backend, options).run()
    if res.x is not None:
        policy, M = assembled.decode(res.x)
        res.policy = policy
        res.schedule = np.round(M).astype(int)
    return res


def solve_fixed_schedule(assembled: AssembledProgram, schedule: np.ndarray, backend: Optional[ConicBackend] = None) -> BackendResult:
    """Convex solve with every binary fixed to ``schedule`` (shape ``(N_R, N-1)``)."""
    lay = assembled.layout
    ones, zeros = set(), set()
    for r in range(lay.n_regions):
        for k in range(lay.N - 1):
            (ones if schedule[r, k] else zeros).add(lay.binary_index(r, k))
    node = BnBNode(frozenset(zeros), frozenset(ones), -np.inf, 0)
    return solve_relaxation(assembled.program, node, backend or ClarabelBackend())


def enumerate_schedules(n_regions: int, n_columns: int):
    """All one-region-per-column assignment matrices."""
    for choice in itertools.product(range(n_regions), repeat=n_columns):
        M = np.zeros((n_regions, n_columns), dtype=int)
        for k, r in enumerate(choice):
            M[r, k] = 1
        yield M
