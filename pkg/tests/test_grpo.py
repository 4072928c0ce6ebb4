import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wst.backends import TeacherPolicy, policy_distribution
from wst.core import GrpoConfig
from wst.grpo import (
    EmptyBatch,
    GroupBatch,
    GroupTooSmall,
    NonFiniteGradient,
    clipped_surrogate,
    grpo_objective,
    grpo_step,
    group_advantages,
    kl_estimate,
)

import grpo_oracle


def test_advantages_hand_value():
    # mean 0.5, population std 0.5
    np.testing.assert_array_equal(group_advantages([1, 0, 1, 0]), [1, -1, 1, -1])


@pytest.mark.parametrize("c", [0.0, 1.0, -3.5, 1e9])
def test_advantages_constant_group(c):
    out = group_advantages([c] * 4)
    assert np.all(out == 0.0)


def test_advantages_group_too_small():
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])


@settings(max_examples=300)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=32))
def test_advantages_standardized(r):
    if max(r) - min(r) < 1e-6:
        return
    a = group_advantages(r)
    assert abs(a.mean()) <= 1e-9
    assert abs(a.std() - 1) <= 1e-9


@given(st.lists(st.integers(-20, 20), min_size=2, max_size=16), st.integers(-1000, 1000))
def test_advantages_shift_invariant(r, c):
    np.testing.assert_array_equal(group_advantages([float(x) for x in r]),
                                  group_advantages([float(x + c) for x in r]))


def test_clipped_surrogate_hand_values():
    assert clipped_surrogate(-1.0, -1.0, 2.0, 0.2) == 2.0
    assert clipped_surrogate(math.log(1.5), 0.0, 1.0, 0.2) == pytest.approx(1.2, abs=1e-15)
    assert clipped_surrogate(math.log(0.5), 0.0, -1.0, 0.2) == pytest.approx(-0.8, abs=1e-15)


def test_kl_estimate_values():
    assert kl_estimate(-0.3, -0.3) == 0.0
    # d = ln 2: 2 - ln 2 - 1
    assert kl_estimate(0.0, math.log(2)) == pytest.approx(1 - math.log(2), abs=1e-15)
    assert kl_estimate(0.0, math.log(2)) == pytest.approx(0.3069, abs=1e-4)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(0)
    for a, b in rng.uniform(-30, 0, size=(100_000, 2)):
        assert kl_estimate(a, b) >= 0.0


def _policy(theta, theta_ref=None):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    ref = theta.copy() if theta_ref is None else np.atleast_2d(np.asarray(theta_ref, dtype=float))
    return TeacherPolicy(tuple(f"t{i}" for i in range(theta.shape[1])), theta, ref)


def test_zero_advantage_zero_kl_is_identity():
    pol = _policy([[0.3, -0.2, 1.0]])
    batch = GroupBatch("q", 0, (0, 1, 2, 1), (-1.0, -1.5, -0.7, -1.5), (0.4, 0.4, 0.4, 0.4))
    new, stats = grpo_step(pol, [batch], GrpoConfig(kl_coefficient=0.0))
    np.testing.assert_allclose(new.theta, pol.theta, atol=1e-12, rtol=0)
    assert stats.grad_norm == 0.0


def test_rewarded_action_gains_probability():
    pol = _policy([0.0, 0.0])
    lp = math.log(0.5)
    batch = GroupBatch("q", 0, (0, 1), (lp, lp), (1.0, 0.0))
    new, _ = grpo_step(pol, [batch], GrpoConfig(kl_coefficient=0.0))
    assert policy_distribution(new)[0] > 0.5


def test_step_does_not_mutate_input():
    pol = _policy([0.0, 0.0])
    before = pol.theta.copy()
    batch = GroupBatch("q", 0, (0, 1), (math.log(0.5),) * 2, (1.0, 0.0))
    grpo_step(pol, [batch], GrpoConfig())
    np.testing.assert_array_equal(pol.theta, before)


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        grpo_step(_policy([0.0, 0.0]), [], GrpoConfig())


def test_nonfinite_gradient():
    pol = _policy([0.0, 0.0])
    batch = GroupBatch("q", 0, (0, 1), (-800.0, -800.0), (1.0, 0.0))
    with pytest.raises(NonFiniteGradient):
        grpo_step(pol, [batch], GrpoConfig(clip_epsilon=1e300))


def random_config(rng):
    n = int(rng.integers(2, 17))
    g = int(rng.integers(2, 17))
    c = int(rng.integers(1, 3))
    theta = rng.normal(0, 1, (c, n))
    theta_ref = theta + rng.normal(0, 0.3, (c, n))
    pol = _policy(theta, theta_ref)
    batches = []
    for b in range(int(rng.integers(1, 4))):
        cat = int(rng.integers(c))
        actions = tuple(int(a) for a in rng.integers(0, n, g))
        lp_now = pol.logprobs(cat)
        # old logprobs a little off the current policy so the ratio leaves 1 and clipping engages
        old = tuple(float(min(lp_now[a] + rng.normal(0, 0.25), 0.0)) for a in actions)
        rewards = tuple(float(x) for x in rng.normal(0, 1, g))
        batches.append(GroupBatch(f"q{b}", cat, actions, old, rewards))
    cfg = GrpoConfig(group_size=g, clip_epsilon=float(rng.uniform(0.05, 0.3)),
                     kl_coefficient=float(rng.uniform(0, 0.5)))
    return pol, batches, cfg


def test_objective_matches_independent_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pol, batches, cfg = random_config(rng)
        obj, _, _ = grpo_objective(pol, batches, cfg)
        ref = grpo_oracle.objective(pol.theta, pol.theta_ref, batches, cfg.clip_epsilon, cfg.kl_coefficient)
        assert obj == pytest.approx(ref, abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        pol, batches, cfg = random_config(rng)
        _, grad, _ = grpo_objective(pol, batches, cfg)
        fd = grpo_oracle.fd_gradient(pol.theta, pol.theta_ref, batches, cfg.clip_epsilon, cfg.kl_coefficient)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), np.linalg.norm(grad)))
    assert worst <= 1e-4


def test_bandit_converges_to_best_arm():
    rng = np.random.default_rng(3)
    pol = TeacherPolicy.uniform([f"t{i}" for i in range(8)], seed=3)
    means = np.full(8, 0.2)
    means[3] = 0.9
    cfg = GrpoConfig()
    for _ in range(500):
        pol = pol.refreshed_reference()
        ins = [pol.sample(0) for _ in range(cfg.group_size)]
        # K = 10 student samples per instruction, as in the training loop
        rewards = tuple(float(np.mean(rng.random(10) < means[i.action_index])) for i in ins)
        batch = GroupBatch("q", 0, tuple(i.action_index for i in ins), tuple(i.logprob_old for i in ins), rewards)
        pol, _ = grpo_step(pol, [batch], cfg)
    assert policy_distribution(pol)[3] >= 0.8
