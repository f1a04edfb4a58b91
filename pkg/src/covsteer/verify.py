"""Closed-form and Monte Carlo verification of a steering policy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .chance import gaussian_tail, inverse_standard_normal_cdf
from .dynamics import assemble_block_operators
from .environment import Scenario, contains_many
from .policy import (
    CostWeights,
    Policy,
    evaluate_cost,
    mean_trajectory,
    sample_rollouts,
    stage_cost_samples,
    state_covariance,
)

CHUNK = 10_000
COV_SLACK = 10.0


@dataclass
class FaceTail:
    region: int
    face: int
    step: int
    column: int
    tail: float


@dataclass
class VerificationReport:
    samples: int
    seed: int
    level: float
    epsilon: float
    # Analytic (closed-form) checks.
    terminal_mean_error: float
    terminal_cov_margin_eigs: list
    face_tails: list
    max_face_tail: float
    implied_union_bound: float
    analytic_cost: float
    # Monte Carlo statistics (empty when samples == 0).
    violation_rates: list = field(default_factory=list)
    violation_radius: list = field(default_factory=list)
    violation_bound: list = field(default_factory=list)
    empirical_face_rates: list = field(default_factory=list)
    terminal_mean_empirical: list = field(default_factory=list)
    terminal_cov_empirical: list = field(default_factory=list)
    empirical_cov_margin_eigs: list = field(default_factory=list)
    cov_slack: float = 0.0
    expected_stage_cost: float = float("nan")
    cost_sample_mean: float = float("nan")
    cost_standard_error: float = float("nan")
    midpoint_violation_rates: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        d = dict(d)
        d.pop("ok", None)
        d["face_tails"] = [FaceTail(**f) if isinstance(f, dict) else f for f in d.get("face_tails", [])]
        return cls(**d)

    def summary_lines(self) -> list[str]:
        lines = [
            f"terminal mean error (inf-norm): {self.terminal_mean_error:.3e}",
            f"min eig(SigmaN - analytic terminal cov): {min(self.terminal_cov_margin_eigs):.3e}",
            f"max closed-form face tail: {self.max_face_tail:.6e} (epsilon {self.epsilon:g})",
            f"implied union bound over assigned faces: {self.implied_union_bound:.3e}",
            f"analytic cost: {self.analytic_cost:.6f}",
        ]
        if self.samples:
            worst = int(np.argmax(self.violation_rates))
            lines += [
                f"samples: {self.samples} (seed {self.seed})",
                f"max per-step obstacle violation rate: {self.violation_rates[worst]:.3e} at step {worst}"
                f" (bound {self.violation_bound[worst]:.3e})",
                f"min eig(SigmaN - empirical terminal cov): {min(self.empirical_cov_margin_eigs):.3e}"
                f" (slack {self.cov_slack:.3e})",
                f"stage cost: sample mean {self.cost_sample_mean:.6f} +- {self.cost_standard_error:.2e},"
                f" analytic {self.expected_stage_cost:.6f}",
            ]
        lines += [f"WARNING: {w}" for w in self.warnings]
        lines += [f"FAIL: {f}" for f in self.failures]
        lines.append("verification " + ("passed" if self.ok else "FAILED"))
        return lines


def assigned_faces(scenario: Scenario, schedule: np.ndarray):
    """Yield ``(region, face, step, column)`` for every face imposed by ``schedule``."""
    regions = scenario.lifted_regions
    for r in range(schedule.shape[0]):
        for k in range(schedule.shape[1]):
            if schedule[r, k]:
                for t in (k, k + 1):
                    for q in range(len(regions[r].faces)):
                        yield r, q, t, k


def closed_form_face_tails(scenario: Scenario, policy: Policy, schedule: np.ndarray) -> list[FaceTail]:
    ops = assemble_block_operators(scenario.system)
    xbar = mean_trajectory(ops, scenario.boundary.mu0, policy)
    SX = state_covariance(ops, scenario.boundary.Sigma0, policy)
    regions = scenario.lifted_regions
    out = []
    for r, q, t, k in assigned_faces(scenario, schedule):
        f = regions[r].faces[q]
        rows = ops.rows(t)
        m = float(f.alpha @ xbar[rows])
        v = float(f.alpha @ SX[rows, rows] @ f.alpha)
        out.append(FaceTail(r, q, t, k, gaussian_tail(m, v, f.beta)))
    return out


def _in_any_obstacle(scenario: Scenario, pos: np.ndarray) -> np.ndarray:
    hit = np.zeros(pos.shape[:-1], dtype=bool)
    for o in scenario.obstacles:
        hit |= contains_many(o, pos)
    return hit


def verify_policy(
    scenario: Scenario,
    policy: Policy,
    samples: int = 100_000,
    seed: int = 0,
    schedule: Optional[np.ndarray] = None,
    level: float = 0.99,
    midpoints: bool = False,
    tail_rtol: float = 1e-6,
) -> VerificationReport:
    """Check a policy against terminal and chance requirements.

    Hard failures: terminal mean error above 1e-6, analytic terminal covariance
    not dominated by ``SigmaN`` (eigenvalue below -1e-8), or any assigned-face
    Gaussian tail above ``epsilon``.  Monte Carlo discrepancies are reported as
    warnings.
    """
    sys_, bnd = scenario.system, scenario.boundary
    ops = assemble_block_operators(sys_)
    N = sys_.horizon
    eps = scenario.epsilon
    xbar = mean_trajectory(ops, bnd.mu0, policy)
    SX = state_covariance(ops, bnd.Sigma0, policy)
    rN = ops.rows(N)
    mean_err = float(np.max(np.abs(xbar[rN] - bnd.muN)))
    cov_eigs = np.linalg.eigvalsh(bnd.SigmaN - SX[rN, rN]).tolist()

    tails = closed_form_face_tails(scenario, policy, schedule) if schedule is not None else []
    max_tail = max((f.tail for f in tails), default=0.0)
    union = float(sum(f.tail for f in tails))

    rep = VerificationReport(
        samples=int(samples),
        seed=int(seed),
        level=level,
        epsilon=eps,
        terminal_mean_error=mean_err,
        terminal_cov_margin_eigs=cov_eigs,
        face_tails=tails,
        max_face_tail=max_tail,
        implied_union_bound=union,
        analytic_cost=evaluate_cost(ops, bnd, scenario.weights, policy),
    )
    if mean_err > 1e-6:
        rep.failures.append(f"terminal mean error {mean_err:.3e} exceeds 1e-6")
    if min(cov_eigs) < -1e-8:
        rep.failures.append(f"terminal covariance exceeds SigmaN (min eigenvalue {min(cov_eigs):.3e})")
    bad = [f for f in tails if f.tail > eps * (1.0 + tail_rtol)]
    if bad:
        worst = max(bad, key=lambda f: f.tail)
        rep.failures.append(
            f"{len(bad)} face tails exceed epsilon; worst {worst.tail:.6e} (region {worst.region}, face {worst.face}, step {worst.step})"
        )
    if samples <= 0:
        return rep

    # Monte Carlo in fixed-size chunks with independent child generators.
    n_chunks = math.ceil(samples / CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    viol = np.zeros(N + 1, dtype=np.int64)
    mid_viol = np.zeros(N, dtype=np.int64)
    face_hits = np.zeros(len(tails), dtype=np.int64)
    sum_xN = np.zeros(sys_.nx)
    sum_xxN = np.zeros((sys_.nx, sys_.nx))
    cost_sum = 0.0
    cost_sq = 0.0
    regions = scenario.lifted_regions
    for c, ss in enumerate(children):
        n = min(CHUNK, samples - c * CHUNK)
        ro = sample_rollouts(sys_, bnd, policy, n, np.random.default_rng(ss))
        pos = scenario.position(ro.x)
        viol += _in_any_obstacle(scenario, pos).sum(axis=0)
        if midpoints:
            mid = 0.5 * (pos[:, 1:] + pos[:, :-1])
            mid_viol += _in_any_obstacle(scenario, mid).sum(axis=0)
        for i, f in enumerate(tails):
            face = regions[f.region].faces[f.face]
            face_hits[i] += int(np.count_nonzero(ro.x[:, f.step] @ face.alpha > face.beta))
        xN = ro.x[:, N]
        sum_xN += xN.sum(axis=0)
        sum_xxN += xN.T @ xN
        costs = stage_cost_samples(ro, scenario.weights)
        cost_sum += float(costs.sum())
        cost_sq += float((costs**2).sum())

    n = samples
    zlev = inverse_standard_normal_cdf(0.5 + level / 2.0)
    rates = viol / n
    rep.violation_rates = rates.tolist()
    rep.violation_radius = (zlev * np.sqrt(rates * (1 - rates) / n)).tolist()
    sigma_eps = math.sqrt(eps * (1 - eps) / n)
    rep.violation_bound = [eps + 3.0 * sigma_eps] * (N + 1)
    rep.empirical_face_rates = (face_hits / n).tolist()
    mean_N = sum_xN / n
    cov_N = (sum_xxN - n * np.outer(mean_N, mean_N)) / (n - 1)
    rep.terminal_mean_empirical = mean_N.tolist()
    rep.terminal_cov_empirical = cov_N.tolist()
    rep.empirical_cov_margin_eigs = np.linalg.eigvalsh(bnd.SigmaN - cov_N).tolist()
    rep.cov_slack = COV_SLACK * float(np.linalg.norm(bnd.SigmaN, 2)) / math.sqrt(n)
    mean_w = CostWeights(scenario.weights.Q_mean, scenario.weights.R_mean, scenario.weights.Q_mean, scenario.weights.R_mean)
    rep.expected_stage_cost = evaluate_cost(ops, bnd, mean_w, policy)
    rep.cost_sample_mean = cost_sum / n
    var = max(cost_sq / n - rep.cost_sample_mean**2, 0.0)
    rep.cost_standard_error = math.sqrt(var / n)
    if midpoints:
        rep.midpoint_violation_rates = (mid_viol / n).tolist()

    over = [k for k in range(N + 1) if rates[k] > rep.violation_bound[k]]
    if over:
        rep.warnings.append(f"empirical obstacle-violation rate above epsilon + 3 sigma at steps {over}")
    if min(rep.empirical_cov_margin_eigs) < -rep.cov_slack:
        rep.warnings.append("empirical terminal covariance exceeds SigmaN beyond statistical slack")
    if midpoints and any(r > 0 for r in rep.midpoint_violation_rates):
        rep.warnings.append("midpoint samples intersect obstacles (informational)")
    return rep


@dataclass
class MeanOnlyComparison:
    full_sequence: list
    mean_only_sequence: list
    full_objective: float
    mean_only_objective: float
    full_regions: list
    mean_only_regions: list

    def to_dict(self) -> dict:
        return asdict(self)


def regions_traversed(scenario: Scenario, schedule: np.ndarray) -> list[str]:
    """Region ids in order of first use by the schedule."""
    seen: list[str] = []
    for k in range(schedule.shape[1]):
        rid = scenario.regions[int(np.argmax(schedule[:, k]))].id
        if not seen or seen[-1] != rid:
            seen.append(rid)
    return seen


def compare_mean_only(scenario: Scenario, full, mean_only) -> MeanOnlyComparison:
    def seq(res):
        return res.region_sequence if res.schedule is not None else []

    def regs(res):
        return regions_traversed(scenario, res.schedule) if res.schedule is not None else []

    return MeanOnlyComparison(
        full_sequence=seq(full),
        mean_only_sequence=seq(mean_only),
        full_objective=float(full.objective),
        mean_only_objective=float(mean_only.objective),
        full_regions=regs(full),
        mean_only_regions=regs(mean_only),
    )
