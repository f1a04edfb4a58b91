from types import SimpleNamespace

import numpy as np
import pytest

from covsteer.environment import builtin_scenario, load_scenario
from covsteer.program import assemble
from covsteer.solver import (
    INFEASIBLE,
    LIMIT_EXCEEDED,
    OPTIMAL,
    BnBNode,
    BranchAndBound,
    SolveOptions,
    branch,
    enumerate_schedules,
    propagate,
    relative_gap,
    solve,
    solve_fixed_schedule,
)
from covsteer.verify import verify_policy

from conftest import scenario_doc


def fake_program(n_regions, n_cols):
    groups = [[r * n_cols + k for r in range(n_regions)] for k in range(n_cols)]
    return SimpleNamespace(integer=np.arange(n_regions * n_cols), one_hot=groups)


def completions(node, n_regions, n_cols):
    out = set()
    for M in enumerate_schedules(n_regions, n_cols):
        v = M.ravel()
        if all(v[i] == 0 for i in node.fixed0) and all(v[i] == 1 for i in node.fixed1):
            out.add(tuple(v))
    return out


def test_single_free_binary():
    prog = SimpleNamespace(integer=np.array([0]), one_hot=[])
    up, down = branch(BnBNode(frozenset(), frozenset(), 0.0, 0), np.array([0.5]), prog)
    assert up.fixed1 == {0} and down.fixed0 == {0}
    assert up.depth == down.depth == 1


def test_fractional_column_propagates():
    prog = fake_program(2, 1)
    up, down = branch(BnBNode(frozenset(), frozenset(), 0.0, 0), np.array([0.5, 0.5]), prog)
    assert up.fixed1 == {0} and up.fixed0 == {1}
    assert down.fixed0 == {0} and down.fixed1 == {1}


def test_most_fractional_and_tie_break():
    prog = fake_program(2, 3)  # index = r * 3 + k
    x = np.array([0.9, 0.6, 0.4, 0.1, 0.4, 0.6])
    up, _ = branch(BnBNode(frozenset(), frozenset(), 0.0, 0), x, prog)
    # 0.6 / 0.4 tie in columns 1 and 2: earliest column, then lowest region.
    assert up.fixed1 == {1}


def test_branch_on_integral_node_raises():
    prog = fake_program(2, 2)
    with pytest.raises(ValueError):
        branch(BnBNode(frozenset(), frozenset(), 0.0, 0), np.array([1.0, 0.0, 0.0, 1.0]), prog)


def test_propagate_detects_conflicts():
    groups = [[0, 1], [2, 3]]
    assert propagate(BnBNode(frozenset({0, 1}), frozenset(), 0, 0), groups) is None
    assert propagate(BnBNode(frozenset(), frozenset({0, 1}), 0, 0), groups) is None
    n = propagate(BnBNode(frozenset({0}), frozenset({3}), 0, 0), groups)
    assert n.fixed1 == {1, 3} and n.fixed0 == {0, 2}


@pytest.mark.parametrize("seed", range(20))
def test_children_partition_completions(seed):
    rng = np.random.default_rng(seed)
    R, C = 2, int(rng.integers(1, 4))
    prog = fake_program(R, C)
    node = BnBNode(frozenset(), frozenset(), 0.0, 0)
    if C > 1 and rng.random() < 0.5:
        node = propagate(BnBNode(frozenset(), frozenset({int(rng.integers(0, R)) * C}), 0.0, 0), prog.one_hot)
    x = rng.uniform(0.05, 0.95, size=R * C)
    for i in node.fixed0:
        x[i] = 0.0
    for i in node.fixed1:
        x[i] = 1.0
    up, down = branch(node, x, prog)
    parent = completions(node, R, C)
    kids = [completions(c, R, C) if c is not None else set() for c in (up, down)]
    assert kids[0] | kids[1] == parent
    assert not kids[0] & kids[1]


def test_relative_gap():
    assert relative_gap(np.inf, 0.0) == np.inf
    assert relative_gap(10.0, 11.0) == 0.0
    assert relative_gap(10.0, 9.0) == pytest.approx(0.1)


def enumerate_best(ap):
    lay = ap.layout
    vals = []
    for M in enumerate_schedules(lay.n_regions, lay.N - 1):
        r = solve_fixed_schedule(ap, M)
        vals.append(r.objective if r.status == OPTIMAL else np.inf)
    return min(vals), len(vals)


def random_toy(seed):
    rng = np.random.default_rng(seed)
    doc = scenario_doc("toy_corridor")
    doc["boundary"]["muN"] = [float(rng.uniform(1.8, 2.7)), float(rng.uniform(0.0, 2.5)), 0.0, 0.0]
    doc["boundary"]["mu0"] = [float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.0)), 0.0, 0.0]
    doc["weights"]["Q_mean"] = [float(v) for v in rng.uniform(0.1, 3.0, 2)] + [0.1, 0.1]
    doc["weights"]["R_cov"] = [float(v) for v in rng.uniform(0.5, 5.0, 2)]
    return load_scenario(doc)


def test_toy_corridor_matches_enumeration():
    ap = assemble(builtin_scenario("toy_corridor"))
    res = solve(ap)
    best, count = enumerate_best(ap)
    assert count == 8
    assert res.status == OPTIMAL
    assert abs(res.objective - best) <= 1e-6 * abs(best)


@pytest.mark.parametrize("seed", range(6))
def test_randomized_enumeration_equivalence(seed):
    ap = assemble(random_toy(seed))
    res = solve(ap)
    best, _ = enumerate_best(ap)
    if np.isinf(best):
        assert res.status == INFEASIBLE
    else:
        assert res.status == OPTIMAL
        assert abs(res.objective - best) <= 1e-6 * abs(best)


def test_three_region_enumeration_equivalence():
    """N_R = 3 with N = 5: 12 binaries, 81 schedules."""
    doc = scenario_doc("toy_corridor")
    doc["system"]["horizon"] = 5
    doc["system"]["dt"] = 0.4
    doc["regions"].append({"id": "overlap", "faces": [
        {"alpha": [1.0, 0.0], "beta": 3.0}, {"alpha": [-1.0, 0.0], "beta": -0.5},
        {"alpha": [0.0, 1.0], "beta": 0.5}, {"alpha": [0.0, -1.0], "beta": 1.0}]})
    ap = assemble(load_scenario(doc))
    res = solve(ap)
    best, count = enumerate_best(ap)
    assert count == 81
    assert abs(res.objective - best) <= 1e-6 * abs(best)


def test_incumbent_is_feasible_and_bounds_monotone():
    s = builtin_scenario("toy_corridor")
    res = solve(assemble(s))
    rep = verify_policy(s, res.policy, samples=0, schedule=res.schedule)
    assert rep.ok, rep.failures
    bounds = {nid: b for nid, _, b in res.history}
    assert res.history[0][2] <= res.objective + 1e-9
    assert all(b is None or b >= res.history[0][2] - 1e-9 for b in bounds.values())


def test_depth_first_and_workers_agree():
    ap = assemble(builtin_scenario("toy_corridor"))
    ref = solve(ap)
    for opts in (SolveOptions(search="depth"), SolveOptions(workers=2)):
        r = solve(ap, opts)
        assert r.status == OPTIMAL
        assert abs(r.objective - ref.objective) <= 1e-6 * abs(ref.objective)


def test_deterministic_node_sequence():
    ap = assemble(builtin_scenario("toy_corridor"))
    a, b = solve(ap), solve(ap)
    assert a.history == b.history
    np.testing.assert_array_equal(a.x, b.x)


def test_convex_scenario_single_node():
    res = solve(assemble(builtin_scenario("convex_box")))
    assert res.status == OPTIMAL and res.nodes == 1


def test_infeasible_box_detected():
    s = builtin_scenario("infeasible_box")
    ops_floor = s.system.D[-1] @ s.system.D[-1].T
    assert np.linalg.eigvalsh(s.boundary.SigmaN - ops_floor).min() < 0
    assert solve(assemble(s)).status == INFEASIBLE


def test_node_limit_reports_limit_exceeded():
    ap = assemble(builtin_scenario("toy_corridor"))
    res = solve(ap, SolveOptions(node_limit=1))
    assert res.status == LIMIT_EXCEEDED
    assert res.nodes == 1


def test_unknown_search_order():
    ap = assemble(builtin_scenario("toy_corridor"))
    with pytest.raises(ValueError):
        BranchAndBound(ap.program, options=SolveOptions(search="breadth"))
