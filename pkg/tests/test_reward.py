import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjshield.reward import (
    COLLISION,
    DANGER,
    NEUTRAL,
    SUCCESS,
    WRONG_INTERRUPT,
    RewardConfig,
    StepOutcome,
    distance_reward,
    distance_reward_branch,
    hj_reward,
    hj_reward_branch,
)

CFG = RewardConfig()


@pytest.mark.parametrize("outcome, expected", [
    (StepOutcome(min_value=1.4, action=1), -5.0),
    (StepOutcome(min_value=-0.2, action=0), -2.0),
    (StepOutcome(collided=True, min_value=0.7), -300.0),
    (StepOutcome(min_value=0.5, action=0), 0.0),
])
def test_hj_reward_examples(outcome, expected):
    assert hj_reward(outcome, CFG) == expected


def test_distance_reward_examples():
    assert distance_reward(StepOutcome(action=2), CFG, distances=[1.0, 2.5]) == -5.0
    assert distance_reward(StepOutcome(), CFG, distances=[0.3, 2.0]) == pytest.approx(-0.5, abs=1e-15)
    assert distance_reward(StepOutcome(finished=True), CFG, distances=[0.9]) == 300.0


def test_outcome_validation():
    with pytest.raises(ValueError):
        StepOutcome(collided=True, finished=True)
    with pytest.raises(ValueError):
        StepOutcome(action=3)
    with pytest.raises(ValueError):
        RewardConfig(k=0)


def _expected_hj(c, f, m, a):
    # literal precedence table: terminal rows, then danger, then wrong interrupt
    if c:
        return -300.0, COLLISION
    if f:
        return 300.0, SUCCESS
    if m <= 0:
        return 10.0 * m, DANGER
    if m >= 1 and a != 0:
        return -5.0, WRONG_INTERRUPT
    return 0.0, NEUTRAL


VALUES = [-1.5, -0.2, 0.0, 1e-9, 0.5, 0.999, 1.0, 1.4, 7.0, float("inf")]


def test_hj_exhaustive_case_table():
    n = 0
    for c, f, m, a in itertools.product([False, True], [False, True], VALUES, [0, 1, 2]):
        if c and f:
            continue
        assert hj_reward_branch(StepOutcome(c, f, m, a), CFG) == _expected_hj(c, f, m, a)
        n += 1
    assert n == 3 * len(VALUES) * 3


def test_distance_exhaustive_case_table():
    for c, f, dist, a in itertools.product([False, True], [False, True],
                                           [0.0, 0.3, 0.35, 0.5, 0.99, 1.0, 3.0, float("inf")], [0, 1, 2]):
        if c and f:
            continue
        if c:
            exp = (-300.0, COLLISION)
        elif f:
            exp = (300.0, SUCCESS)
        elif dist <= 0.35:
            exp = (10.0 * (dist - 0.35), DANGER)
        elif dist >= 1.0 and a != 0:
            exp = (-5.0, WRONG_INTERRUPT)
        else:
            exp = (0.0, NEUTRAL)
        assert distance_reward_branch(StepOutcome(c, f, 5.0, a, dist), CFG) == exp


@settings(max_examples=300, deadline=None)
@given(st.booleans(), st.booleans(), st.floats(-5, 5), st.integers(0, 2))
def test_exactly_one_branch(c, f, m, a):
    if c and f:
        return
    r, b = hj_reward_branch(StepOutcome(c, f, m, a), CFG)
    assert (r, b) == _expected_hj(c, f, m, a)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 0), st.floats(-5, 0))
def test_danger_branch_monotone(m1, m2):
    lo, hi = sorted((m1, m2))
    assert hj_reward(StepOutcome(min_value=lo), CFG) <= hj_reward(StepOutcome(min_value=hi), CFG)


@settings(max_examples=100, deadline=None)
@given(st.floats(1, 100))
def test_following_default_in_safety_is_free(m):
    assert hj_reward(StepOutcome(min_value=m, action=0), CFG) == 0.0
