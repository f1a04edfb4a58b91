import math

import numpy as np
import pytest

from covsteer.environment import builtin_scenario, load_scenario
from covsteer.policy import Policy
from covsteer.program import assemble
from covsteer.solver import solve
from covsteer.verify import VerificationReport, closed_form_face_tails, regions_traversed, verify_policy

from conftest import scenario_doc


@pytest.fixture(scope="module")
def toy_solution():
    s = builtin_scenario("toy_corridor")
    res = solve(assemble(s))
    return s, res


def test_deterministic_rollouts_give_zero_one_rates():
    doc = scenario_doc("toy_corridor")
    doc["system"]["noise_scale"] = 0.0
    doc["boundary"]["Sigma0"] = [0.0, 0.0, 0.0, 0.0]
    # Drive the mean straight through the obstacle.
    doc["boundary"]["mu0"] = [0.0, 1.5, 0.0, 0.0]
    s = load_scenario(doc)
    rep = verify_policy(s, Policy.zeros(4, 2, 4), samples=2000, seed=1)
    assert set(rep.violation_rates) <= {0.0, 1.0}
    assert rep.violation_rates[0] == 1.0
    assert max(rep.terminal_cov_empirical[0][0], 0.0) == 0.0


def test_solved_toy_passes_and_tails_agree(toy_solution):
    s, res = toy_solution
    rep = verify_policy(s, res.policy, samples=100_000, seed=3, schedule=res.schedule)
    assert rep.ok, rep.failures
    assert rep.max_face_tail <= s.epsilon
    assert all(0.0 <= p <= 1.0 for p in rep.violation_rates)
    n = rep.samples
    for f, emp in zip(rep.face_tails, rep.empirical_face_rates):
        se = math.sqrt(max(f.tail * (1 - f.tail), 1.0 / n) / n)
        assert abs(emp - f.tail) <= 4 * se
    assert abs(rep.cost_sample_mean - rep.expected_stage_cost) <= 4 * rep.cost_standard_error
    assert min(rep.empirical_cov_margin_eigs) >= -rep.cov_slack


def test_seed_determinism(toy_solution):
    s, res = toy_solution
    a = verify_policy(s, res.policy, samples=25_000, seed=9, schedule=res.schedule)
    b = verify_policy(s, res.policy, samples=25_000, seed=9, schedule=res.schedule)
    c = verify_policy(s, res.policy, samples=25_000, seed=10, schedule=res.schedule)
    assert a.to_dict() == b.to_dict()
    assert a.terminal_mean_empirical != c.terminal_mean_empirical


def test_corrupted_gain_fails_covariance_dominance(toy_solution):
    s, res = toy_solution
    K = res.policy.K.copy()
    K[-1] = 0.0
    rep = verify_policy(s, Policy(res.policy.v, K), samples=0, schedule=res.schedule)
    assert not rep.ok
    assert any("covariance" in f for f in rep.failures)


def test_shifted_mean_fails(toy_solution):
    s, res = toy_solution
    v = res.policy.v.copy()
    v[0, 1] += 5.0  # pushes the early mean upward out of the bottom region
    rep = verify_policy(s, Policy(v, res.policy.K), samples=0, schedule=res.schedule)
    assert any("terminal mean" in f for f in rep.failures)
    assert any("face tails" in f for f in rep.failures)


def test_samples_zero_skips_monte_carlo(toy_solution):
    s, res = toy_solution
    rep = verify_policy(s, res.policy, samples=0, schedule=res.schedule)
    assert rep.ok and rep.violation_rates == [] and math.isnan(rep.cost_sample_mean)


def test_report_dict_round_trip(toy_solution):
    s, res = toy_solution
    rep = verify_policy(s, res.policy, samples=1000, seed=0, schedule=res.schedule, midpoints=True)
    back = VerificationReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    assert len(rep.midpoint_violation_rates) == s.horizon
    assert rep.summary_lines()[-1] == "verification passed"


def test_face_tail_count(toy_solution):
    s, res = toy_solution
    tails = closed_form_face_tails(s, res.policy, res.schedule)
    assert len(tails) == sum(2 * len(s.regions[int(np.argmax(res.schedule[:, k]))].faces) for k in range(3))
    assert regions_traversed(s, res.schedule) == ["bottom", "right"]
