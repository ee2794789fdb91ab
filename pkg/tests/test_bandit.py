import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynskip.autodiff import sigmoid
from dynskip.bandit import (
    CandidateBatch,
    RedundancyState,
    SearchAbort,
    final_skip_set,
    random_mask,
    read_trajectory,
    reward,
    sample_mask,
    sample_scores,
    select_skip_set,
    update_redundancy,
)
from dynskip.network import SkipMask


def brute_top_m(values, m):
    # sort by (-value, index), take the first m
    ranked = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return set(ranked[:m])


def test_initial_state_is_zero():
    state = RedundancyState.zeros(5)
    assert np.all(state.r == 0) and state.step == 0 and state.trajectory == []


def test_scores_at_zero_redundancy_are_below_half():
    s = sample_scores(RedundancyState.zeros(1000), np.random.default_rng(0))
    assert np.all((s >= 0) & (s < 0.5))


def test_very_negative_redundancy_is_never_picked():
    state = RedundancyState(np.array([-50.0, 0.0, 0.0]))
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = sample_scores(state, rng)
        assert s[0] < 1e-9
        assert 0 not in select_skip_set(s, 2)


def test_score_mean_monte_carlo():
    r = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
    rng = np.random.default_rng(2)
    draws = np.array([sample_scores(RedundancyState(r), rng) for _ in range(100_000)])
    np.testing.assert_allclose(draws.mean(axis=0), sigmoid(r) / 2, rtol=0.01)


def test_scores_are_seed_deterministic():
    state = RedundancyState(np.linspace(-1, 1, 6))
    a = sample_scores(state, np.random.default_rng(3))
    b = sample_scores(state, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


def test_select_skip_set_examples():
    assert select_skip_set([0.3, 0.1], 0) == SkipMask([], 2)
    assert select_skip_set([0.1, 0.4, 0.3], 2).skipped == {1, 2}
    assert select_skip_set([0.2, 0.2, 0.2, 0.2], 2).skipped == {0, 1}
    with pytest.raises(ValueError):
        select_skip_set([0.1, 0.2], 3)


@settings(max_examples=200, deadline=None)
@given(
    values=st.lists(st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 1)), min_size=1, max_size=12),
    data=st.data(),
)
def test_select_matches_sorting_oracle(values, data):
    m = data.draw(st.integers(0, len(values)))
    assert select_skip_set(values, m).skipped == brute_top_m(values, m)
    state = RedundancyState(np.array(values, dtype=float))
    assert final_skip_set(state, m).skipped == brute_top_m(values, m)


def test_reward_values():
    assert reward(0.0) == 1.0
    assert reward(math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert reward(4.7) == pytest.approx(0.00909, abs=1e-5)
    assert reward(4.7) == math.exp(-4.7)
    assert reward(0.1) > reward(0.2)
    with pytest.raises(SearchAbort):
        reward(float("nan"))


def test_update_hand_arithmetic():
    state = RedundancyState.zeros(8)
    masks = [SkipMask([2, 5], 8), SkipMask([0, 1], 8), SkipMask([3, 7], 8)]
    update_redundancy(state, CandidateBatch(masks, np.array([0.9, 0.6, 0.6])))
    expected = np.zeros(8)
    expected[[2, 5]] = 0.2
    expected[[0, 1, 3, 7]] = -0.1
    np.testing.assert_allclose(state.r, expected, atol=1e-15)
    assert state.step == 1
    assert len(state.trajectory) == 1


def test_update_overlapping_candidates_accumulate():
    state = RedundancyState.zeros(4)
    masks = [SkipMask([0, 1], 4), SkipMask([1, 2], 4)]
    update_redundancy(state, CandidateBatch(masks, np.array([0.8, 0.4])))
    np.testing.assert_allclose(state.r, [0.2, 0.0, -0.2, 0.0], atol=1e-15)


def test_equal_rewards_leave_r_unchanged():
    state = RedundancyState(np.array([0.5, -0.25, 1.0]))
    before = state.r.copy()
    update_redundancy(state, CandidateBatch([SkipMask([0], 3), SkipMask([2], 3)], np.array([0.7, 0.7])))
    np.testing.assert_array_equal(state.r, before)


def test_update_requires_rewards():
    with pytest.raises(ValueError):
        update_redundancy(RedundancyState.zeros(3), CandidateBatch([SkipMask([0], 3)]))


def test_conservation_over_random_batches():
    rng = np.random.default_rng(4)
    state = RedundancyState.zeros(8)
    total = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        masks = [random_mask(8, 3, rng) for _ in range(c)]
        update_redundancy(state, CandidateBatch(masks, rng.random(c)))
        assert abs(state.r.sum() - total) < 1e-12


def test_update_is_bounded():
    rng = np.random.default_rng(5)
    c = 4
    for _ in range(200):
        state = RedundancyState.zeros(6)
        masks = [random_mask(6, 1, rng) for _ in range(c)]
        update_redundancy(state, CandidateBatch(masks, rng.random(c)))
        assert np.all(np.abs(state.r) <= c * (c - 1) / c + 1e-12)


def test_trajectory_steps_increase_and_export(tmp_path):
    rng = np.random.default_rng(6)
    state = RedundancyState.zeros(3)
    for _ in range(4):
        update_redundancy(state, CandidateBatch([random_mask(3, 1, rng) for _ in range(2)], rng.random(2)))
    steps = [s for s, _ in state.trajectory]
    assert steps == [1, 2, 3, 4]
    path = tmp_path / "traj.csv"
    state.write_trajectory(path)
    assert path.read_text().splitlines()[0] == "step,module_0,module_1,module_2"
    back = read_trajectory(path)
    for (s1, r1), (s2, r2) in zip(state.trajectory, back):
        assert s1 == s2 and r1.tobytes() == r2.tobytes()


def test_skip_frequency_monotone_in_redundancy():
    rng = np.random.default_rng(7)
    freqs = []
    for level in (0.0, 2.0):
        r = np.zeros(8)
        r[3] = level
        state = RedundancyState(r)
        hits = sum(3 in sample_mask(state, 2, rng) for _ in range(100_000))
        freqs.append(hits / 100_000)
    assert freqs[1] > freqs[0]


def test_uniform_skip_frequency_at_zero_redundancy():
    rng = np.random.default_rng(8)
    state = RedundancyState.zeros(8)
    counts = np.zeros(8)
    for _ in range(100_000):
        counts[sample_mask(state, 2, rng).sorted()] += 1
    np.testing.assert_allclose(counts / 100_000, 0.25, atol=0.02)


def test_random_mask_has_m_distinct():
    rng = np.random.default_rng(9)
    for _ in range(50):
        assert random_mask(8, 3, rng).m == 3


def run_stationary_bandit(seed, planted=frozenset({2, 5}), n=8, m=2, c=4, intervals=500):
    rng = np.random.default_rng(seed)
    state = RedundancyState.zeros(n)
    for _ in range(intervals):
        masks = [sample_mask(state, m, rng) for _ in range(c)]
        v = np.array([0.9 if mask.skipped == planted else 0.5 for mask in masks]) + rng.normal(0, 0.05, c)
        update_redundancy(state, CandidateBatch(masks, v))
    return state


def test_stationary_recovery_small_sample():
    wins = sum(final_skip_set(run_stationary_bandit(seed), 2).skipped == {2, 5} for seed in range(20))
    assert wins >= 19


def test_stationary_run_is_deterministic():
    a, b = run_stationary_bandit(11, intervals=50), run_stationary_bandit(11, intervals=50)
    assert a.r.tobytes() == b.r.tobytes()
