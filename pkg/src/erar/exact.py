"""Exact tabular solvers for the entropy-regularized average-reward problem.

Everything here works on a :class:`~erar.mdp.TabularMdp` and is exact up to
floating point: the reward rate comes from the stationary distribution, the
differential value from a fixed-point iteration (or a direct linear solve),
and improvement from the Boltzmann form ``pi' ~ pi0 * exp(beta * Q)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ArgumentError, ConvergenceError, VerificationError
from .mdp import (
    TabularMdp,
    TabularPolicy,
    _probs,
    log_ratio,
    make_random_mdp,
    regularized_rewards,
    reward_rate,
    stationary_distribution,
)

EVAL_TOL = 1e-10
PI_TOL = 1e-9
MAX_SWEEPS = 100_000


@dataclass(frozen=True)
class DifferentialValue:
    """Anchored differential action values ``q`` and the reward rate ``theta``."""

    q: np.ndarray
    theta: float
    anchor: tuple = (0, 0)

    def state_values(self, policy, prior, inv_temperature: float) -> np.ndarray:
        return soft_state_values(self.q, policy, prior, inv_temperature)

    def advantages(self, policy, prior, inv_temperature: float) -> np.ndarray:
        return self.q - self.state_values(policy, prior, inv_temperature)[:, None]


@dataclass
class SolveReport:
    iterations: int = 0
    final_residual: float = float("inf")
    theta_history: list = field(default_factory=list)
    converged: bool = False


def log_sum_exp(values: np.ndarray, weights: np.ndarray, axis: int = -1) -> np.ndarray:
    """``log sum_i w_i exp(x_i)`` with max-subtraction."""
    top = np.max(values, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        total = np.sum(weights * np.exp(values - top), axis=axis, keepdims=True)
    return np.squeeze(top + np.log(total), axis=axis)


def soft_maximum(q: np.ndarray, prior, inv_temperature: float) -> np.ndarray:
    """Soft maximum ``(1/beta) log E_{pi0}[exp(beta q)]`` per state."""
    return log_sum_exp(inv_temperature * np.asarray(q), _probs(prior)) / inv_temperature


def soft_state_values(q, policy, prior, inv_temperature: float) -> np.ndarray:
    probs = _probs(policy)
    return np.sum(probs * (np.asarray(q) - log_ratio(probs, prior) / inv_temperature), axis=1)


def soft_state_value(dv: DifferentialValue, policy, prior, inv_temperature: float, state: int) -> float:
    """``E_{a~pi}[Q(s, a) - log(pi(a|s)/pi0(a|s))/beta]`` at one state."""
    probs = _probs(policy)[state:state + 1]
    return float(soft_state_values(dv.q[state:state + 1], probs, _probs(prior)[state:state + 1], inv_temperature)[0])


def boltzmann(q: np.ndarray, prior, inv_temperature: float) -> np.ndarray:
    logits = np.log(_probs(prior)) + inv_temperature * np.asarray(q)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def soft_policy_improvement(dv: DifferentialValue, prior, inv_temperature: float) -> TabularPolicy:
    """Boltzmann policy ``pi0 * exp(beta * Q) / Z``, row by row."""
    q = dv.q if isinstance(dv, DifferentialValue) else np.asarray(dv)
    return TabularPolicy(boltzmann(q, prior, inv_temperature))


def _check_anchor(mdp: TabularMdp, anchor) -> tuple:
    s, a = (int(anchor[0]), int(anchor[1]))
    if not (0 <= s < mdp.num_states and 0 <= a < mdp.num_actions):
        raise ArgumentError(f"anchor {anchor} outside the state-action grid")
    return s, a


def backup_residual(mdp: TabularMdp, policy, dv: DifferentialValue, inv_temperature: float) -> float:
    """``max |Q - (r - theta + P V)|`` for the policy the values belong to."""
    v = soft_state_values(dv.q, policy, mdp.prior, inv_temperature)
    target = mdp.rewards - dv.theta + mdp.expected_next(v)
    return float(np.max(np.abs(dv.q - target)))


def soft_policy_evaluation(mdp: TabularMdp, policy, inv_temperature: float, tolerance: float = EVAL_TOL,
                           max_iters: int = MAX_SWEEPS, anchor=(0, 0), method: str = "iterative",
                           initial_q=None):
    """Differential value of a fixed policy.

    The rate comes first, in closed form.  ``method="iterative"`` then sweeps
    ``Q <- r - theta + P V(Q)`` and re-anchors after every sweep until the
    sup-norm change drops below ``tolerance``.  ``method="direct"`` solves
    the state-value linear system instead; use it for periodic or slowly
    mixing chains such as the pendulum grid.
    """
    if tolerance <= 0:
        raise ArgumentError("tolerance must be positive")
    if inv_temperature <= 0:
        raise ArgumentError("inv_temperature must be positive")
    anchor = _check_anchor(mdp, anchor)
    probs = _probs(policy)
    lr = log_ratio(probs, mdp.prior)
    dist = stationary_distribution(mdp, probs).d
    theta = reward_rate(mdp, probs, inv_temperature, distribution=dist)
    report = SolveReport(theta_history=[theta])

    if method == "direct":
        q = _direct_evaluation(mdp, probs, inv_temperature, theta, dist)
        q = q - q[anchor]
        report.iterations = 1
    elif method == "iterative":
        penalty = np.sum(probs * lr, axis=1) / inv_temperature
        base = mdp.rewards - theta
        q = np.zeros((mdp.num_states, mdp.num_actions)) if initial_q is None else np.array(initial_q, dtype=float)
        q = q - q[anchor]
        for it in range(1, int(max_iters) + 1):
            v = np.sum(probs * q, axis=1) - penalty
            new = base + mdp.expected_next(v)
            new -= new[anchor]
            delta = float(np.max(np.abs(new - q)))
            q = new
            report.iterations = it
            if delta < tolerance:
                break
        else:
            report.final_residual = backup_residual(mdp, probs, DifferentialValue(q, theta, anchor), inv_temperature)
            raise ConvergenceError(f"policy evaluation did not converge in {max_iters} sweeps", report)
    else:
        raise ArgumentError(f"unknown evaluation method {method!r}")

    dv = DifferentialValue(q, theta, anchor)
    report.final_residual = backup_residual(mdp, probs, dv, inv_temperature)
    report.converged = report.final_residual < 10 * tolerance
    return dv, report


def _direct_evaluation(mdp: TabularMdp, probs, inv_temperature, theta, dist) -> np.ndarray:
    c = regularized_rewards(mdp, probs, inv_temperature) - theta
    M = mdp.state_matrix(probs)
    # (I - M) v = c is singular along constants; pin v at a recurrent state
    pin = int(np.argmax(dist))
    rhs = c.copy()
    rhs[pin] = 0.0
    if sp.issparse(M):
        system = (sp.identity(mdp.num_states, format="csr") - M).tolil()
        system[pin, :] = 0.0
        system[pin, pin] = 1.0
        v = spla.spsolve(system.tocsc(), rhs)
    else:
        system = np.eye(mdp.num_states) - M
        system[pin, :] = 0.0
        system[pin, pin] = 1.0
        v = np.linalg.solve(system, rhs)
    return mdp.rewards - theta + mdp.expected_next(v)


def soft_policy_iteration(mdp: TabularMdp, inv_temperature: float, tolerance: float = PI_TOL,
                          max_rounds: int = 10_000, anchor=(0, 0), eval_tolerance: float = EVAL_TOL,
                          method: str = "iterative"):
    """Alternate evaluation and Boltzmann improvement, starting from the prior.

    Stops when successive policies differ by less than ``tolerance`` in the
    sup norm and returns the last evaluated policy with its values.
    """
    if tolerance <= 0:
        raise ArgumentError("tolerance must be positive")
    policy = mdp.prior.probs
    q = None
    report = SolveReport()
    for rnd in range(1, int(max_rounds) + 1):
        dv, _ = soft_policy_evaluation(mdp, policy, inv_temperature, eval_tolerance, anchor=anchor,
                                       method=method, initial_q=q)
        q = dv.q
        report.theta_history.append(dv.theta)
        improved = boltzmann(dv.q, mdp.prior, inv_temperature)
        change = float(np.max(np.abs(improved - policy)))
        report.iterations = rnd
        report.final_residual = change
        if change < tolerance:
            report.converged = True
            return TabularPolicy(policy), dv, report
        policy = improved
    raise ConvergenceError(f"soft policy iteration did not converge in {max_rounds} rounds", report)


def rate_gap_rhs(mdp: TabularMdp, pi, pi_prime, dv_pi: DifferentialValue, inv_temperature: float) -> float:
    """``E_{s~d_pi', a~pi'}[A^pi(s, a) - log(pi'(a|s)/pi0(a|s))/beta]``."""
    p, pp = _probs(pi), _probs(pi_prime)
    adv = dv_pi.advantages(p, mdp.prior, inv_temperature)
    lr = log_ratio(pp, mdp.prior)
    d = stationary_distribution(mdp, pp).d
    return float(d @ np.sum(pp * (adv - lr / inv_temperature), axis=1))


def discounted_soft_q(mdp: TabularMdp, inv_temperature: float, discount: float, tolerance: float = 1e-10,
                      max_iters: int = 100_000) -> np.ndarray:
    """Optimal soft discounted Q: fixed point of ``Q <- r + gamma P V_soft(Q)``.

    Plain value iteration needs ~1/(1 - gamma) sweeps, so the fixed point is
    first located by discounted soft policy iteration (exact linear solves)
    and then polished with value-iteration sweeps until the sweep change is
    below ``tolerance``.
    """
    if not (0.0 <= discount < 1.0):
        raise ArgumentError("discount must lie in [0, 1)")
    if discount == 0.0:
        return np.array(mdp.rewards, dtype=float)
    beta = inv_temperature
    prior = mdp.prior.probs
    policy = prior
    S = mdp.num_states
    q = np.array(mdp.rewards, dtype=float)
    for _ in range(200):
        c = regularized_rewards(mdp, policy, beta)
        M = mdp.state_matrix(policy)
        if sp.issparse(M):
            v = spla.spsolve((sp.identity(S, format="csc") - discount * M).tocsc(), c)
        else:
            v = np.linalg.solve(np.eye(S) - discount * M, c)
        q = mdp.rewards + discount * mdp.expected_next(v)
        improved = boltzmann(q, prior, beta)
        if np.max(np.abs(improved - policy)) < 1e-13:
            break
        policy = improved
    scale = max(1.0, float(np.max(np.abs(q))))
    for _ in range(int(max_iters)):
        new = mdp.rewards + discount * mdp.expected_next(soft_maximum(q, prior, beta))
        delta = float(np.max(np.abs(new - q)))
        q = new
        # relative floor: |Q| ~ theta / (1 - gamma) limits attainable precision
        if delta < max(tolerance, 8 * np.finfo(float).eps * scale):
            break
    return q


def centered(q: np.ndarray, anchor=(0, 0)) -> np.ndarray:
    return q - q[tuple(anchor)]


def gamma_sweep(mdp: TabularMdp, inv_temperature: float, discounts=(0.9, 0.99, 0.999, 0.9999), anchor=(0, 0)):
    """Distance between centered discounted soft Q and the differential Q* per discount."""
    _, dv, _ = soft_policy_iteration(mdp, inv_temperature, anchor=anchor)
    rows = []
    for g in discounts:
        qg = discounted_soft_q(mdp, inv_temperature, g)
        v_soft = soft_maximum(qg, mdp.prior, inv_temperature)
        rows.append({
            "discount": float(g),
            "centered_q_distance": float(np.max(np.abs(centered(qg, anchor) - dv.q))),
            "rate_distance": float(np.max(np.abs((1 - g) * v_soft - dv.theta))),
        })
    return {"theta_star": dv.theta, "rows": rows}


# -- batch verification ----------------------------------------------------

RATE_GAP_TOL = 1e-8
MONOTONE_TOL = 1e-10
STRICT_GAP = 1e-12
STRICT_CHANGE = 1e-6
FIXED_POINT_TOL = 1e-8


def _random_policy(rng: np.random.Generator, S: int, A: int) -> np.ndarray:
    w = rng.exponential(size=(S, A))
    return w / w.sum(axis=1, keepdims=True)


def _new_check(tol):
    return {"tolerance": tol, "checked": 0, "violations": 0, "worst": 0.0, "failing_seeds": []}


def _record(check, value, ok, seed):
    check["checked"] += 1
    check["worst"] = max(check["worst"], float(value))
    if not ok:
        check["violations"] += 1
        if seed not in check["failing_seeds"]:
            check["failing_seeds"].append(seed)


def verify_theorems(num_mdps: int, seed: int = 0, sizes=((5, 3), (20, 4)), inv_temperature=1.0,
                    mixing: float = 0.1, perturb_pi_prime: float = 0.0, strict: bool = False) -> dict:
    """Check the rate-gap identity, monotone improvement and the fixed point.

    Instance ``i`` is ``make_random_mdp(seed + i, *sizes[i % len(sizes)])``
    with ``beta = betas[(i // len(sizes)) % len(betas)]``; its random
    policies come from ``Generator(PCG64([seed, i]))``.  For every instance:

    * rate gap: ``theta(pi') - theta(pi)`` against :func:`rate_gap_rhs` for
      the Boltzmann improvement of a random ``pi`` and for a second random,
      non-Boltzmann policy;
    * monotonicity: ``theta(pi') >= theta(pi)`` for the improvement of the
      random policy and of the converged ``pi*``, strict when the policies
      differ by more than 1e-6;
    * fixed point: ``pi*`` equals the Boltzmann policy of its own advantage.

    With ``perturb_pi_prime > 0`` the improved policies are mixed with the
    uniform policy.  Monotonicity is then not guaranteed, so its violations
    are reported as an expected failure and never raise.
    """
    if num_mdps < 1:
        raise ArgumentError("num_mdps must be >= 1")
    sizes = [tuple(int(x) for x in s) for s in sizes]
    betas = list(np.atleast_1d(inv_temperature).astype(float))
    checks = {
        "rate_gap": _new_check(RATE_GAP_TOL),
        "monotonicity": _new_check(MONOTONE_TOL),
        "strict_improvement": _new_check(STRICT_GAP),
        "fixed_point": _new_check(FIXED_POINT_TOL),
        "backup_residual": _new_check(FIXED_POINT_TOL),
    }
    checks["monotonicity"]["expected_failure"] = perturb_pi_prime > 0
    checks["strict_improvement"]["expected_failure"] = perturb_pi_prime > 0
    instances = []
    for i in range(num_mdps):
        S, A = sizes[i % len(sizes)]
        beta = betas[(i // len(sizes)) % len(betas)]
        mdp_seed = seed + i
        mdp = make_random_mdp(mdp_seed, S, A, mixing)
        rng = np.random.Generator(np.random.PCG64([seed, i]))
        pi = _random_policy(rng, S, A)
        other = _random_policy(rng, S, A)
        instances.append({"seed": mdp_seed, "states": S, "actions": A, "beta": beta})

        def improve(dv):
            p = boltzmann(dv.q, mdp.prior, beta)
            if perturb_pi_prime > 0:
                p = (1 - perturb_pi_prime) * p + perturb_pi_prime / A
            return p

        dv_pi, _ = soft_policy_evaluation(mdp, pi, beta)
        theta_pi = dv_pi.theta
        pi_prime = improve(dv_pi)
        for candidate in (pi_prime, other):
            lhs = reward_rate(mdp, candidate, beta) - theta_pi
            gap = abs(lhs - rate_gap_rhs(mdp, pi, candidate, dv_pi, beta))
            _record(checks["rate_gap"], gap, gap < RATE_GAP_TOL, mdp_seed)

        pi_star, dv_star, _ = soft_policy_iteration(mdp, beta)
        pairs = [(pi, theta_pi, dv_pi), (pi_star.probs, dv_star.theta, dv_star)]
        for base, theta_base, dv_base in pairs:
            candidate = improve(dv_base)
            diff = reward_rate(mdp, candidate, beta) - theta_base
            _record(checks["monotonicity"], max(0.0, -diff), diff >= -MONOTONE_TOL, mdp_seed)
            if np.max(np.abs(candidate - base)) > STRICT_CHANGE:
                _record(checks["strict_improvement"], max(0.0, STRICT_GAP - diff), diff > STRICT_GAP, mdp_seed)

        adv = dv_star.advantages(pi_star, mdp.prior, beta)
        fp = float(np.max(np.abs(pi_star.probs - boltzmann(adv, mdp.prior, beta))))
        _record(checks["fixed_point"], fp, fp < FIXED_POINT_TOL, mdp_seed)
        res = backup_residual(mdp, pi_star, dv_star, beta)
        _record(checks["backup_residual"], res, res < FIXED_POINT_TOL, mdp_seed)

    unexpected = sum(c["violations"] for c in checks.values() if not c.get("expected_failure"))
    report = {
        "num_mdps": num_mdps,
        "seed": seed,
        "sizes": [list(s) for s in sizes],
        "inv_temperature": betas,
        "mixing": mixing,
        "perturb_pi_prime": perturb_pi_prime,
        "checks": checks,
        "instances": instances,
        "total_violations": sum(c["violations"] for c in checks.values()),
        "unexpected_violations": unexpected,
        "passed": unexpected == 0,
    }
    if strict and unexpected:
        failing = sorted({s for c in checks.values() if not c.get("expected_failure") for s in c["failing_seeds"]})
        raise VerificationError(f"theorem checks failed for MDP seed(s) {failing}", seed=failing[0], report=report)
    return report
