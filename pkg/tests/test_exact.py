import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import erar.exact as exact
from erar.errors import ArgumentError, ConvergenceError, VerificationError
from erar.exact import (
    DifferentialValue,
    backup_residual,
    boltzmann,
    centered,
    discounted_soft_q,
    gamma_sweep,
    log_sum_exp,
    rate_gap_rhs,
    soft_maximum,
    soft_policy_evaluation,
    soft_policy_improvement,
    soft_policy_iteration,
    soft_state_value,
    verify_theorems,
)
from erar.mdp import TabularMdp, TabularPolicy, make_random_mdp, reward_rate

from conftest import ONE_STATE_THETA

P1 = math.e / (1.0 + math.e)


def random_policy(seed, S, A):
    w = np.random.default_rng(seed).exponential(size=(S, A))
    return w / w.sum(axis=1, keepdims=True)


def linear_oracle(mdp, pi, beta, anchor=(0, 0)):
    """Differential Q from one least-squares solve over state-action pairs."""
    S, A = mdp.num_states, mdp.num_actions
    P = mdp.transitions.reshape(S * A, S)
    M = mdp.state_matrix(pi)
    vals, vecs = np.linalg.eig(M.T)
    d = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    d /= d.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(pi > 0, pi * np.log(pi / mdp.prior.probs), 0.0).sum(axis=1)
    theta = d @ ((pi * mdp.rewards).sum(axis=1) - kl / beta)
    expand = np.zeros((S, S * A))
    for s in range(S):
        expand[s, s * A:(s + 1) * A] = pi[s]
    lhs = np.eye(S * A) - P @ expand
    rhs = mdp.rewards.ravel() - theta - P @ (kl / beta)
    pin = np.zeros(S * A)
    pin[anchor[0] * A + anchor[1]] = 1.0
    q = np.linalg.lstsq(np.vstack([lhs, pin]), np.append(rhs, 0.0), rcond=None)[0]
    return q.reshape(S, A), theta


class TestSoftOperators:
    def test_log_sum_exp_large_values(self):
        out = log_sum_exp(np.array([[1000.0, 1001.0]]), np.array([[0.5, 0.5]]))
        assert out[0] == pytest.approx(1001.0 + math.log((1 + math.exp(-1)) / 2), abs=1e-12)

    def test_state_value_examples(self):
        prior = TabularPolicy.uniform(1, 2)
        assert soft_state_value(DifferentialValue(np.zeros((1, 2)), 0.0), prior, prior, 3.0, 0) == 0.0
        dv = DifferentialValue(np.array([[0.0, 1.0]]), 0.0)
        assert soft_state_value(dv, prior, prior, 7.0, 0) == pytest.approx(0.5, abs=1e-15)
        boltz = soft_policy_improvement(dv, prior, 1.0)
        assert soft_state_value(dv, boltz, prior, 1.0, 0) == pytest.approx(ONE_STATE_THETA, abs=1e-12)

    def test_improvement_examples(self):
        prior = TabularPolicy.uniform(1, 2)
        assert np.allclose(soft_policy_improvement(DifferentialValue(np.zeros((1, 2)), 0.0), prior, 2.0).probs,
                           prior.probs, atol=1e-15)
        pi = soft_policy_improvement(DifferentialValue(np.array([[0.0, 1.0]]), 0.0), prior, 1.0)
        assert pi.probs[0] == pytest.approx([1 - P1, P1], abs=1e-12)

    def test_no_overflow_at_large_beta(self):
        q = np.array([[0.0, 3.0, -2.0]])
        pi = boltzmann(q, np.full((1, 3), 1 / 3), 1e3)
        assert np.all(np.isfinite(pi)) and pi[0, 1] == pytest.approx(1.0)
        assert np.isfinite(soft_maximum(q, np.full((1, 3), 1 / 3), 1e3)).all()

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50), beta=st.floats(0.01, 100))
    def test_shift_invariance(self, seed, shift, beta):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(4, 3))
        prior = random_policy(seed, 4, 3)
        assert np.max(np.abs(boltzmann(q, prior, beta) - boltzmann(q + shift, prior, beta))) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), beta=st.floats(0.05, 20))
    def test_variational_formula(self, seed, beta):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(3, 4))
        prior = random_policy(seed + 1, 3, 4)
        soft = soft_maximum(q, prior, beta)
        pi = random_policy(seed + 2, 3, 4)
        lower = np.sum(pi * (q - np.log(pi / prior) / beta), axis=1)
        assert np.all(soft >= lower - 1e-12)
        best = boltzmann(q, prior, beta)
        attained = np.sum(best * (q - np.log(best / prior) / beta), axis=1)
        assert np.max(np.abs(soft - attained)) < 1e-10


class TestPolicyEvaluation:
    def test_constant_stream(self):
        mdp = TabularMdp(1, 1, np.ones((1, 1, 1)), np.array([[0.3]]))
        dv, report = soft_policy_evaluation(mdp, [[1.0]], 1.0)
        assert dv.theta == pytest.approx(0.3, abs=1e-15) and dv.q.tolist() == [[0.0]]
        assert report.converged

    def test_one_state_boltzmann(self, one_state_mdp):
        dv, _ = soft_policy_evaluation(one_state_mdp, [[1 - P1, P1]], 1.0)
        assert dv.theta == pytest.approx(ONE_STATE_THETA, abs=1e-12)
        assert dv.q[0] == pytest.approx([0.0, 1.0], abs=1e-12)

    def test_zero_rewards_at_prior(self):
        mdp = make_random_mdp(2, 4, 3).with_rewards(np.zeros((4, 3)))
        dv, _ = soft_policy_evaluation(mdp, mdp.prior, 0.7)
        assert abs(dv.theta) < 1e-15 and np.max(np.abs(dv.q)) < 1e-12

    @pytest.mark.parametrize("method", ["iterative", "direct"])
    @pytest.mark.parametrize("anchor", [(0, 0), (2, 1)])
    def test_matches_linear_oracle(self, method, anchor):
        mdp = make_random_mdp(13, 5, 3)
        pi = random_policy(4, 5, 3)
        dv, report = soft_policy_evaluation(mdp, pi, 2.0, anchor=anchor, method=method)
        q_ref, theta_ref = linear_oracle(mdp, pi, 2.0, anchor)
        assert dv.q[anchor] == 0.0
        assert dv.theta == pytest.approx(theta_ref, abs=1e-12)
        assert np.max(np.abs(dv.q - q_ref)) < 1e-9
        assert report.final_residual < 1e-9

    def test_nonconvergence_carries_report(self):
        mdp = make_random_mdp(1, 5, 3)
        with pytest.raises(ConvergenceError) as info:
            soft_policy_evaluation(mdp, mdp.prior, 1.0, max_iters=2)
        assert info.value.report.iterations == 2 and not info.value.report.converged

    def test_bad_arguments(self, one_state_mdp):
        with pytest.raises(ArgumentError):
            soft_policy_evaluation(one_state_mdp, [[0.5, 0.5]], 1.0, tolerance=0.0)
        with pytest.raises(ArgumentError):
            soft_policy_evaluation(one_state_mdp, [[0.5, 0.5]], 1.0, anchor=(1, 0))
        with pytest.raises(ArgumentError):
            soft_policy_evaluation(one_state_mdp, [[0.5, 0.5]], 1.0, method="magic")


class TestPolicyIteration:
    def test_closed_form(self, one_state_mdp):
        pi, dv, report = soft_policy_iteration(one_state_mdp, 1.0)
        assert dv.theta == pytest.approx(ONE_STATE_THETA, abs=1e-9)
        assert pi.probs[0, 1] == pytest.approx(P1, abs=1e-9)
        assert report.converged

    def test_zero_rewards(self):
        mdp = make_random_mdp(3, 3, 2).with_rewards(np.zeros((3, 2)))
        pi, dv, _ = soft_policy_iteration(mdp, 1.0)
        assert np.allclose(pi.probs, mdp.prior.probs, atol=1e-12) and abs(dv.theta) < 1e-12

    def test_greedy_limit(self, one_state_mdp):
        thetas, probs = [], []
        for beta in (1.0, 10.0, 100.0, 1000.0):
            pi, dv, _ = soft_policy_iteration(one_state_mdp, beta)
            thetas.append(dv.theta)
            probs.append(pi.probs[0, 1])
        assert np.all(np.diff(thetas) > 0) and np.all(np.diff(probs) >= 0)
        assert thetas[-1] == pytest.approx(1.0, abs=1e-3) and probs[-1] == pytest.approx(1.0, abs=1e-6)

    def test_prior_limit(self):
        mdp = make_random_mdp(8, 5, 3)
        pi, _, _ = soft_policy_iteration(mdp, 1e-4)
        assert np.max(np.abs(pi.probs - mdp.prior.probs)) < 1e-3

    def test_history_monotone_and_residual(self):
        mdp = make_random_mdp(5, 20, 4)
        pi, dv, report = soft_policy_iteration(mdp, 5.0)
        assert np.all(np.diff(report.theta_history) >= -1e-8)
        assert backup_residual(mdp, pi, dv, 5.0) < 1e-8
        assert dv.q[0, 0] == 0.0

    def test_direct_method_agrees(self):
        mdp = make_random_mdp(6, 6, 3)
        _, a, _ = soft_policy_iteration(mdp, 1.0)
        _, b, _ = soft_policy_iteration(mdp, 1.0, method="direct")
        assert a.theta == pytest.approx(b.theta, abs=1e-10)
        assert np.max(np.abs(a.q - b.q)) < 1e-8

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-3, 3))
    def test_reward_shift(self, seed, shift):
        mdp = make_random_mdp(seed, 4, 3)
        pi, dv, _ = soft_policy_iteration(mdp, 1.5)
        pi2, dv2, _ = soft_policy_iteration(mdp.with_rewards(mdp.rewards + shift), 1.5)
        assert dv2.theta - dv.theta == pytest.approx(shift, abs=1e-10)
        assert np.max(np.abs(pi2.probs - pi.probs)) < 1e-10
        assert np.max(np.abs(dv2.q - dv.q)) < 1e-10


class TestRateGap:
    def test_same_policy_is_zero(self):
        mdp = make_random_mdp(2, 5, 3)
        pi = random_policy(1, 5, 3)
        dv, _ = soft_policy_evaluation(mdp, pi, 1.0)
        assert abs(rate_gap_rhs(mdp, pi, pi, dv, 1.0)) < 1e-12

    def test_arbitrary_pair(self):
        mdp = make_random_mdp(3, 5, 3)
        pi, other = random_policy(1, 5, 3), random_policy(2, 5, 3)
        dv, _ = soft_policy_evaluation(mdp, pi, 0.3)
        lhs = reward_rate(mdp, other, 0.3) - reward_rate(mdp, pi, 0.3)
        assert abs(lhs - rate_gap_rhs(mdp, pi, other, dv, 0.3)) < 1e-8

    def test_boltzmann_gap_nonnegative(self):
        mdp = make_random_mdp(4, 5, 3)
        pi = random_policy(5, 5, 3)
        dv, _ = soft_policy_evaluation(mdp, pi, 1.0)
        assert rate_gap_rhs(mdp, pi, soft_policy_improvement(dv, mdp.prior, 1.0), dv, 1.0) >= -1e-10


class TestDiscounted:
    def test_zero_discount(self):
        mdp = make_random_mdp(1, 3, 2)
        assert np.array_equal(discounted_soft_q(mdp, 1.0, 0.0), mdp.rewards)

    def test_single_state_bulk_term(self, one_state_mdp):
        q = discounted_soft_q(one_state_mdp, 1.0, 0.9)
        assert (1 - 0.9) * soft_maximum(q, one_state_mdp.prior, 1.0)[0] == pytest.approx(ONE_STATE_THETA, abs=1e-10)

    def test_matches_value_iteration(self):
        mdp = make_random_mdp(9, 5, 3)
        q = np.zeros((5, 3))
        for _ in range(3000):
            q = mdp.rewards + 0.9 * mdp.transitions @ soft_maximum(q, mdp.prior, 2.0)
        assert np.max(np.abs(discounted_soft_q(mdp, 2.0, 0.9) - q)) < 1e-9

    def test_near_one_matches_average_reward(self):
        mdp = make_random_mdp(10, 5, 3)
        _, dv, _ = soft_policy_iteration(mdp, 1.0)
        q = discounted_soft_q(mdp, 1.0, 0.9999)
        assert np.max(np.abs(centered(q) - dv.q)) < 1e-2
        assert np.max(np.abs(1e-4 * soft_maximum(q, mdp.prior, 1.0) - dv.theta)) < 1e-3

    def test_bad_discount(self, one_state_mdp):
        with pytest.raises(ArgumentError):
            discounted_soft_q(one_state_mdp, 1.0, 1.0)

    def test_sweep_decreases(self):
        result = gamma_sweep(make_random_mdp(12, 5, 3), 1.0)
        dist = [r["centered_q_distance"] for r in result["rows"]]
        assert np.all(np.diff(dist) < 0)


class TestVerifyTheorems:
    def test_default_sweep_clean(self):
        report = verify_theorems(100, sizes=[(5, 3), (20, 4)], inv_temperature=1.0)
        assert report["passed"] and report["total_violations"] == 0
        assert report["checks"]["rate_gap"]["checked"] == 200

    def test_degenerate_single_state(self):
        report = verify_theorems(1, sizes=[(1, 1)])
        assert report["passed"]

    def test_perturbed_improvement_is_expected_failure(self):
        report = verify_theorems(20, perturb_pi_prime=0.1, strict=True)
        mono = report["checks"]["strict_improvement"]
        assert mono["expected_failure"] and mono["violations"] > 0
        assert report["unexpected_violations"] == 0 and report["passed"]

    def test_strict_names_failing_seed(self, monkeypatch):
        monkeypatch.setattr(exact, "rate_gap_rhs", lambda *args: 1.0)
        with pytest.raises(VerificationError) as info:
            verify_theorems(3, seed=40, strict=True)
        assert info.value.seed == 40
        assert info.value.report["checks"]["rate_gap"]["failing_seeds"] == [40, 41, 42]

    def test_report_is_json_compatible(self):
        import json

        report = verify_theorems(2)
        assert json.loads(json.dumps(report)) == report
