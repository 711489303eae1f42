import logging

import numpy as np
import pytest

from intermode import collect, evaluation, sim
from intermode.collect import Trajectory
from intermode.evaluation import GroundingTarget


@pytest.fixture(scope="module")
def drawer_env():
    return collect.Env(sim.load_fixture("drawer_1")).calibrated(60)


def oracle_sampler(direction=+1, method="grasp"):
    def sample(env, k, seed):
        plan = []

        def policy(phase, obs, state):
            if phase == 0:
                plan[:] = sim.scripted_witness(state, 0, direction, method)
            return plan[phase]

        return collect.run_policy(env, policy, seed, "oracle", with_steps=False)
    return sample


def fake(successes):
    it = iter(successes)

    def sample(env, k, seed):
        return Trajectory(env.spec.name, seed, "fake", [], True, true_success=next(it))
    return sample


def test_oracle_policy_ssr_is_one(drawer_env):
    door = collect.Env(sim.load_fixture("door")).calibrated(60)
    rep = evaluation.eval_ssr(oracle_sampler(), [drawer_env, door], 5, seed=0)
    assert rep.ssr == 1.0 and [r.ssr for r in rep.rows] == [1.0, 1.0]


def test_ssr_ratio(drawer_env):
    rep = evaluation.eval_ssr(fake([True] * 3 + [False] * 7), [drawer_env], 10)
    assert rep.ssr == pytest.approx(0.3)
    assert rep.to_csv().splitlines()[-1] == "all,aggregate,3,10,0.300000"


def test_aggregate_is_weighted_mean_and_order_free():
    rows = [evaluation.SsrRow("a", "seen", 3, 10), evaluation.SsrRow("b", "seen", 9, 30)]
    fwd, rev = evaluation.SsrReport(rows), evaluation.SsrReport(rows[::-1])
    assert fwd.ssr == rev.ssr == pytest.approx((0.3 * 10 + 0.3 * 30) / 40)


def test_unknown_split_rejected(drawer_env):
    with pytest.raises(ValueError):
        evaluation.eval_ssr(fake([True]), [drawer_env], 1, splits={"drawer_1": "novel"})


def test_random_baseline_low(drawer_env):
    rep = evaluation.eval_ssr(evaluation.random_sampler, [drawer_env], 100, seed=1)
    assert rep.ssr < 0.3


def test_mode_histograms_conserve_counts(drawer_env):
    rep = evaluation.eval_mode_ssr(oracle_sampler(-1), drawer_env, 4, K=3, seed=0)
    assert all(c.n == 4 for c in rep.clusters)
    assert sum(c.n for c in rep.clusters) == 12


def test_policy_ignoring_mode_has_one_dominant_mode(drawer_env):
    rep = evaluation.eval_mode_ssr(oracle_sampler(-1, "push"), drawer_env, 3, K=4, seed=0)
    assert rep.distinct_dominant_modes() == {"0-"}
    assert rep.ranking()[0] == 1
    assert "dominant_mode" in rep.to_csv().splitlines()[0]


def synthetic_pull(p):
    p = np.asarray(p)

    def pull(arm, seed):
        return float(np.random.default_rng(seed).random() < p[arm])
    return pull


ARMS = [0.9, 0.1, 0, 0, 0, 0, 0, 0]


def test_ucb_synthetic_last_ten_reward():
    hits = [evaluation.ucb1(synthetic_pull(ARMS), 8, 50, seed=s).mean_reward(10) >= 0.6 for s in range(100)]
    assert np.mean(hits) >= 0.95


def test_ucb_best_arm_most_pulled():
    best = [evaluation.ucb1(synthetic_pull(ARMS), 8, 50, seed=s).best_arm == 0 for s in range(100)]
    assert np.mean(best) >= 0.95


def test_ucb_beats_uniform_two_arm():
    wins = 0
    for s in range(100):
        ucb = sum(evaluation.ucb1(synthetic_pull([0.9, 0.1]), 2, 50, seed=s).rewards)
        rng = np.random.default_rng([s, 7])
        uni = sum(synthetic_pull([0.9, 0.1])(int(rng.integers(2)), collect.trajectory_seed(s, t)) for t in range(50))
        wins += ucb > uni
    assert wins >= 95


def test_ucb_curve_length_and_reward_range():
    run = evaluation.ucb1(synthetic_pull(ARMS), 8, 50, seed=0)
    assert len(run.rewards) == 50 and set(run.rewards) <= {0.0, 1.0}
    assert len(run.curve_csv().splitlines()) == 51
    assert run.counts.sum() == 50


def test_vacuous_tolerance_always_rewards(drawer_env):
    part = drawer_env.spec.parts[0]
    target = GroundingTarget(0, 0.5 * (part.d_min + part.d_max), part.span + 1e-9)
    for d in np.linspace(part.d_min, part.d_max, 11):
        assert target.reward([d]) == 1.0


def test_unreachable_target_zero_curve(drawer_env, caplog):
    target = GroundingTarget(0, 5.0, 0.01)
    with caplog.at_level(logging.WARNING):
        run = evaluation.ground_bandit(oracle_sampler(), drawer_env, target, iterations=7)
    assert run.rewards == [0.0] * 7 and run.counts.sum() == 0
    assert "outside the joint range" in caplog.text


def test_bandit_on_oracle_clusters(drawer_env):
    # cluster 3 opens, all others close: the bandit should settle on arm index 2
    def sample(env, k, seed):
        return oracle_sampler(+1 if k == 3 else -1)(env, k, seed)

    part = drawer_env.spec.parts[0]
    target = GroundingTarget.for_part(drawer_env.spec, 0, part.d_max)
    run = evaluation.ground_bandit(sample, drawer_env, target, K=4, iterations=20, seed=0)
    assert run.best_arm == 2


def test_cem_constant_reward_drifts_within_sigma():
    run = evaluation.cem(lambda x, s: 1.0, np.zeros(4), 1.0, iterations=30, seed=0)
    shifts = [np.abs(b - a) / s for a, b, s in zip(run.means[:-1], run.means[1:], run.stds[:-1])]
    assert np.sqrt(np.mean(np.square(shifts))) < 1.0


def test_cem_quadratic_optimum():
    opt = np.array([0.7, -1.2, 0.3])
    run = evaluation.cem(lambda x, s: -np.sum((x - opt) ** 2), np.zeros(3), 2.0, iterations=30, seed=1)
    assert np.linalg.norm(run.mean - opt) < 0.1


def test_cem_rejects_large_elite():
    with pytest.raises(ValueError):
        evaluation.cem(lambda x, s: 0.0, np.zeros(2), 1.0, pop=4, elite=5)


def test_cem_std_reinflated():
    run = evaluation.cem(lambda x, s: -np.sum(x ** 2), np.zeros(2), 1.0, iterations=40, seed=0, min_std=0.05)
    assert np.all(np.concatenate(run.stds) >= 0.05)
