from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orgincentive.incentives import (
    Driver,
    IncentiveOutcome,
    Organization,
    OrganizationError,
    incentive_value,
    load_organizations,
    merged_cost_dominance,
    organizations_to_json,
    partition_cost,
    validate_outcome,
)


def two_route_example():
    """20 drivers with a 25-minute baseline; 15 move to a 30-minute route, 5 stay on a 20-minute one."""
    delta = np.array([20.0, 30.0])
    S = np.zeros((2, 20))
    S[1, :15] = 1
    S[0, 15:] = 1
    return S, delta, np.full(20, 25.0)


def _org(n, gamma, vot=1.0):
    org = Organization("o", vot, [Driver("a", "b", 0)] * n)
    org.gamma = gamma
    return org


def test_singletons_versus_one_organization():
    S, delta, base = two_route_example()
    fine = [[j] for j in range(20)]
    coarse = [list(range(20))]
    assert merged_cost_dominance(fine, coarse, S, delta, base, 1.0) == (75.0, 50.0)


def test_merged_org_incentive_value():
    S, delta, _ = two_route_example()
    assert incentive_value(_org(20, 500.0), S, delta) == 50.0


def test_org_that_gains_costs_nothing():
    S, delta, _ = two_route_example()
    assert incentive_value(_org(20, 10_000.0), S, delta) == 0.0
    gains = np.zeros((2, 4))
    gains[0] = 1
    assert merged_cost_dominance([[0], [1], [2], [3]], [[0, 1, 2, 3]], gains, delta, np.full(4, 25.0), 1.0) == (0.0, 0.0)


def test_default_vot_ten_minutes():
    S = np.array([[1.0]])
    assert incentive_value(_org(1, 0.0, vot=2.63), S, np.array([10.0])) == pytest.approx(26.3, rel=1e-15)


def test_missing_baseline_rejected():
    org = Organization("o", 1.0, [Driver("a", "b", 0)])
    with pytest.raises(OrganizationError, match="baseline"):
        incentive_value(org, np.ones((1, 1)), np.ones(1))


def test_not_a_coarsening_rejected():
    S, delta, base = two_route_example()
    with pytest.raises(ValueError, match="coarsening"):
        merged_cost_dominance([[0, 1]] + [[j] for j in range(2, 20)], [[0] + list(range(2, 20)), [1]], S, delta, base, 1.0)


def _all_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _all_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1 :]
        yield [[first]] + part


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-10, 10), min_size=1, max_size=6), st.floats(0.1, 5))
def test_coarsening_never_costs_more(excess, vot):
    n = len(excess)
    times = np.array(excess, dtype=float)
    base = np.zeros(n)
    S = np.eye(n)
    parts = list(_all_partitions(list(range(n))))
    for fine in parts:
        # every coarsening of ``fine`` is a partition of its blocks
        for grouping in _all_partitions(list(range(len(fine)))):
            coarse = [sorted(i for b in group for i in fine[b]) for group in grouping]
            cf, cc = merged_cost_dominance(fine, coarse, S, times, base, vot)
            assert cc <= cf + 1e-12
        assert partition_cost(fine, times, base, vot) >= partition_cost([list(range(n))], times, base, vot) - 1e-12


@given(st.floats(-50, 50), st.floats(0.01, 10), st.floats(0.01, 10))
def test_value_nonnegative_and_scales(loss, vot, kappa):
    S = np.array([[1.0]])
    org = _org(1, 100.0, vot)
    t = 100.0 + loss
    c = incentive_value(org, S, np.array([t]))
    assert c >= 0
    assert (c == 0) == (t <= 100.0)
    scaled = _org(1, 100.0, vot * kappa)
    assert incentive_value(scaled, S, np.array([t])) == pytest.approx(kappa * c, rel=1e-12, abs=1e-12)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 1))
def test_value_convex_in_loss(a, b, t):
    org = _org(1, 0.0, 1.7)
    f = lambda x: incentive_value(org, np.array([[1.0]]), np.array([x]))  # noqa: E731
    assert f(t * a + (1 - t) * b) <= t * f(a) + (1 - t) * f(b) + 1e-9


def _validation_case():
    delta = np.array([10.0, 14.0])
    o1 = _org(2, 20.0, 2.0)
    o1.id = "alpha"
    o2 = _org(1, 10.0, 1.0)
    o2.id = "beta"
    S1 = np.array([[1.0, 0.0], [0.0, 1.0]])  # one driver moved: +4 min
    S2 = np.array([[1.0], [0.0]])
    return delta, [o1, o2], [S1, S2]


def test_validate_exact_costs():
    delta, orgs, S = _validation_case()
    assert validate_outcome(IncentiveOutcome(np.array([8.0, 0.0]), 10.0), orgs, S, delta) == []


def test_validate_budget_boundary():
    delta, orgs, S = _validation_case()
    assert validate_outcome(IncentiveOutcome(np.array([8.0, 0.0]), 8.0), orgs, S, delta) == []
    assert validate_outcome(IncentiveOutcome(np.array([8.0, 0.0]), 7.9), orgs, S, delta)


def test_validate_underpayment_names_org():
    delta, orgs, S = _validation_case()
    problems = validate_outcome(IncentiveOutcome(np.array([7.0, 0.0]), 10.0), orgs, S, delta)
    assert len(problems) == 1 and "alpha" in problems[0]


def test_organizations_json_round_trip(tmp_path):
    orgs = [
        Organization("a", 2.0, [Driver("x", "y", 1, 1.5), Driver("y", "x", 0)]),
        Organization("bg", 0.0, [Driver("x", "y", 2)], background=True),
    ]
    path = tmp_path / "orgs.json"
    path.write_text(json.dumps(organizations_to_json(orgs)))
    back = load_organizations(path)
    assert [(o.id, o.vot_per_min, o.drivers, o.background) for o in back] == [
        (o.id, o.vot_per_min, o.drivers, o.background) for o in orgs
    ]


def test_b_factor_below_one_rejected():
    with pytest.raises(OrganizationError):
        Driver("a", "b", 0, 0.9)


def test_equal_costs_compare_exactly():
    # every driver loses, so merging cannot help; round-off must not make it look worse
    rng = np.random.default_rng(0)
    times = rng.uniform(10, 20, 500)
    base = times - rng.uniform(0, 3, 500)
    fine = [[j] for j in range(500)]
    blocks = [list(range(k, 500, 7)) for k in range(7)]
    cf, cm = merged_cost_dominance(fine, blocks, np.eye(500), times, base, 2.63)
    cm2, c1 = merged_cost_dominance(blocks, [list(range(500))], np.eye(500), times, base, 2.63)
    assert cm == cm2 and c1 <= cm <= cf
