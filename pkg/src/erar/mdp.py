"""Finite MDPs, stationary distributions and exact reward rates.

Transitions are stored either densely as an ``(S, A, S)`` array or, for large
grid models, as a sparse ``(S*A, S)`` CSR matrix.  Every solver goes through
:meth:`TabularMdp.expected_next` and :meth:`TabularMdp.state_matrix`, so both
layouts are interchangeable.

Random instances are drawn from ``numpy.random.Generator(PCG64(seed))``; see
:func:`make_random_mdp` for the exact draw order.
"""

from __future__ import annotations

import bisect
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .errors import ArgumentError, DivergenceError, StructuralError

ROW_TOL = 1e-12
STATIONARY_TOL = 1e-10
POWER_MAX_STEPS = 1_000_000
DENSE_LSTSQ_MAX = 500


@dataclass(frozen=True)
class TabularPolicy:
    """Row-stochastic table ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ArgumentError(f"policy table must be 2-D, got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ArgumentError("policy probabilities must be finite and non-negative")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ArgumentError("policy rows must sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def from_unnormalized(cls, weights) -> "TabularPolicy":
        """Normalize non-negative weights row by row."""
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class StationaryDistribution:
    d: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.d, dtype=dtype)


@dataclass(frozen=True)
class TabularMdp:
    """A finite MDP together with the prior policy of the regularizer."""

    num_states: int
    num_actions: int
    transitions: object
    rewards: np.ndarray
    prior: TabularPolicy = field(default=None)

    def __post_init__(self):
        S, A = int(self.num_states), int(self.num_actions)
        if S < 1 or A < 1:
            raise ArgumentError("num_states and num_actions must be positive")
        rewards = np.array(self.rewards, dtype=float)
        if rewards.shape != (S, A):
            raise ArgumentError(f"rewards must have shape {(S, A)}, got {rewards.shape}")
        if not np.all(np.isfinite(rewards)):
            raise ArgumentError("rewards must be finite")
        rewards.setflags(write=False)

        if sp.issparse(self.transitions):
            P = sp.csr_matrix(self.transitions, dtype=float)
            if P.shape != (S * A, S):
                raise ArgumentError(f"sparse transitions must have shape {(S * A, S)}")
            if P.nnz and P.data.min() < 0:
                raise ArgumentError("transition probabilities must be non-negative")
            row_sums = np.asarray(P.sum(axis=1)).ravel()
        else:
            P = np.array(self.transitions, dtype=float)
            if P.shape != (S, A, S):
                raise ArgumentError(f"transitions must have shape {(S, A, S)}, got {P.shape}")
            if np.any(P < 0) or not np.all(np.isfinite(P)):
                raise ArgumentError("transition probabilities must be finite and non-negative")
            row_sums = P.sum(axis=2)
            P.setflags(write=False)
        if np.max(np.abs(row_sums - 1.0)) > ROW_TOL:
            raise ArgumentError("every transition row P[s, a, :] must sum to 1")

        prior = self.prior if self.prior is not None else TabularPolicy.uniform(S, A)
        if not isinstance(prior, TabularPolicy):
            prior = TabularPolicy(prior)
        if prior.probs.shape != (S, A):
            raise ArgumentError("prior shape does not match the MDP")
        if np.any(prior.probs <= 0):
            raise ArgumentError("prior must have full support")

        object.__setattr__(self, "num_states", S)
        object.__setattr__(self, "num_actions", A)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "prior", prior)

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.transitions)

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """``(P v)[s, a] = sum_s' P(s'|s, a) v(s')`` as an ``(S, A)`` array."""
        if self.is_sparse:
            return (self.transitions @ values).reshape(self.num_states, self.num_actions)
        return self.transitions @ values

    def state_matrix(self, policy):
        """Policy-induced state chain ``M[s, s'] = sum_a pi(a|s) P(s'|s, a)``."""
        probs = _probs(policy)
        if self.is_sparse:
            S, A = self.num_states, self.num_actions
            weights = sp.csr_matrix(
                (probs.ravel(), np.arange(S * A), np.arange(0, S * A + 1, A)), shape=(S, S * A)
            )
            return (weights @ self.transitions).tocsr()
        return np.einsum("sa,sat->st", probs, self.transitions)

    def with_rewards(self, rewards) -> "TabularMdp":
        return TabularMdp(self.num_states, self.num_actions, self.transitions, rewards, self.prior)

    def with_prior(self, prior) -> "TabularMdp":
        return TabularMdp(self.num_states, self.num_actions, self.transitions, self.rewards, prior)

    def dense_transitions(self) -> np.ndarray:
        if self.is_sparse:
            return self.transitions.toarray().reshape(self.num_states, self.num_actions, -1)
        return self.transitions

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transitions": self.dense_transitions().tolist(),
            "rewards": self.rewards.tolist(),
            "prior": self.prior.probs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        if not isinstance(data, dict):
            raise ArgumentError("MDP document must be an object")
        missing = [k for k in ("num_states", "num_actions", "transitions", "rewards") if k not in data]
        if missing:
            raise ArgumentError(f"MDP document is missing field(s): {', '.join(missing)}")
        for key in ("num_states", "num_actions"):
            if not isinstance(data[key], int) or isinstance(data[key], bool):
                raise ArgumentError(f"field '{key}' must be an integer")
        for key in ("transitions", "rewards", "prior"):
            if key in data:
                try:
                    np.array(data[key], dtype=float)
                except (TypeError, ValueError) as exc:
                    raise ArgumentError(f"field '{key}' is not a numeric array: {exc}") from None
        prior = data.get("prior")
        try:
            return cls(
                data["num_states"],
                data["num_actions"],
                np.array(data["transitions"], dtype=float),
                np.array(data["rewards"], dtype=float),
                TabularPolicy(prior) if prior is not None else None,
            )
        except ArgumentError as exc:
            raise ArgumentError(f"invalid MDP document: {exc}") from None

    def dumps(self) -> str:
        # repr of a Python float is the shortest string that round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "TabularMdp":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"malformed MDP JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.loads(Path(path).read_text())


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, TabularPolicy) else np.asarray(policy, dtype=float)


def make_random_mdp(seed: int, num_states: int, num_actions: int, mixing: float = 0.1) -> TabularMdp:
    """Random communicating MDP with a uniform prior.

    Draw order from ``Generator(PCG64(seed))``: one ``exponential`` array of
    shape ``(S, A, S)`` (normalized per row, i.e. Dirichlet(1) simplex points),
    then one ``uniform(-1, 1)`` reward array of shape ``(S, A)``.  Each row is
    then ``(1 - mixing) * simplex + mixing / S``, which makes every state
    reachable in one step under any policy.
    """
    if int(num_states) < 1 or int(num_actions) < 1:
        raise ArgumentError("num_states and num_actions must be >= 1")
    if not (0.0 < mixing <= 1.0):
        raise ArgumentError("mixing must lie in (0, 1]")
    S, A = int(num_states), int(num_actions)
    rng = np.random.Generator(np.random.PCG64(seed))
    raw = rng.exponential(size=(S, A, S))
    simplex = raw / raw.sum(axis=2, keepdims=True)
    rewards = rng.uniform(-1.0, 1.0, size=(S, A))
    P = (1.0 - mixing) * simplex + mixing / S
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(S, A, P, rewards, TabularPolicy.uniform(S, A))


def stationary_distribution(mdp: TabularMdp, policy) -> StationaryDistribution:
    """Unique ``d`` with ``d^T M = d^T`` and ``sum(d) = 1``.

    Small dense chains use a least-squares solve of ``(M^T - I) d = 0`` with
    the normalization row appended; a rank-deficient system means more than
    one recurrent class.  Large or sparse chains use a square solve with one
    balance equation replaced by the normalization.  If the residual is not
    below tolerance, a Cesaro-averaged power iteration takes over.
    """
    M = mdp.state_matrix(policy)
    S = mdp.num_states
    d = None
    if sp.issparse(M) or S > DENSE_LSTSQ_MAX:
        d = _recurrent_class_solve(sp.csr_matrix(M))
    else:
        system = np.vstack([M.T - np.eye(S), np.ones((1, S))])
        rhs = np.zeros(S + 1)
        rhs[-1] = 1.0
        d, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
        if rank < S:
            raise StructuralError("induced chain has more than one recurrent class")
    if d is None or _stationary_residual(M, d) > STATIONARY_TOL or d.min() < -STATIONARY_TOL:
        d = _power_iteration(M)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return StationaryDistribution(d)


def _recurrent_class_solve(M: sp.csr_matrix):
    """Stationary vector supported on the single closed class of ``M``."""
    M = M.copy()
    M.eliminate_zeros()
    n_comp, labels = csgraph.connected_components(M, directed=True, connection="strong")
    coo = M.tocoo()
    leaks = np.zeros(n_comp, dtype=bool)
    leaks[labels[coo.row][labels[coo.row] != labels[coo.col]]] = True
    closed = np.flatnonzero(~leaks)
    if len(closed) != 1:
        raise StructuralError(f"induced chain has {len(closed)} recurrent classes")
    idx = np.flatnonzero(labels == closed[0])
    n = len(idx)
    sub = M[idx][:, idx]
    system = (sub.T - sp.identity(n, format="csr")).tolil()
    system[n - 1, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = spla.spsolve(system.tocsc(), rhs)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    d = np.zeros(M.shape[0])
    d[idx] = sol
    return d


def _stationary_residual(M, d) -> float:
    return float(max(np.max(np.abs(M.T @ d - d)), abs(d.sum() - 1.0)))


def _power_iteration(M, max_steps: int = POWER_MAX_STEPS) -> np.ndarray:
    S = M.shape[0]
    MT = M.T.tocsr() if sp.issparse(M) else M.T
    x = np.full(S, 1.0 / S)
    avg = x.copy()
    for k in range(1, max_steps + 1):
        x = MT @ x
        # running Cesaro mean handles periodic chains
        avg += (x - avg) / (k + 1)
        if k % 64 == 0 and _stationary_residual(M, avg / avg.sum()) < STATIONARY_TOL:
            return avg / avg.sum()
    raise StructuralError(f"power iteration did not converge in {max_steps} steps")


def kl_divergence(policy, prior, state: int) -> float:
    """``KL(pi(.|s) || pi0(.|s))`` with ``0 log 0 = 0``."""
    p = _probs(policy)[state]
    q = _probs(prior)[state]
    return float(_kl_rows(p[None, :], q[None, :])[0])


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if np.any((p > 0) & (q <= 0)):
        raise DivergenceError("policy is not absolutely continuous w.r.t. the prior")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    return terms.sum(axis=1)


def log_ratio(policy, prior) -> np.ndarray:
    """``log(pi/pi0)`` per entry, with 0 wherever ``pi`` is 0."""
    p, q = _probs(policy), _probs(prior)
    if np.any((p > 0) & (q <= 0)):
        raise DivergenceError("policy is not absolutely continuous w.r.t. the prior")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, np.log(p) - np.log(np.where(q > 0, q, 1.0)), 0.0)


def regularized_rewards(mdp: TabularMdp, policy, inv_temperature: float, entropy_on: bool = True) -> np.ndarray:
    """Per-state expected one-step reward ``sum_a pi (r - log(pi/pi0)/beta)``."""
    probs = _probs(policy)
    per_state = np.sum(probs * mdp.rewards, axis=1)
    if entropy_on:
        per_state = per_state - _kl_rows(probs, mdp.prior.probs) / inv_temperature
    return per_state


def reward_rate(mdp: TabularMdp, policy, inv_temperature: float = 1.0, entropy_on: bool = True,
                distribution=None) -> float:
    """Exact long-run (regularized) reward rate from the stationary distribution."""
    if inv_temperature <= 0:
        raise ArgumentError("inv_temperature must be positive")
    per_state = regularized_rewards(mdp, policy, inv_temperature, entropy_on)
    d = stationary_distribution(mdp, policy).d if distribution is None else np.asarray(distribution)
    return float(d @ per_state)


def empirical_reward_rate(mdp: TabularMdp, policy, inv_temperature: float, horizon: int, seed: int,
                          start_state: int | None = None) -> float:
    """Running average of ``r - log(pi/pi0)/beta`` along one simulated trajectory.

    The start state is uniform unless ``start_state`` is given.  Randomness:
    ``Generator(PCG64(seed))`` draws the start state, then one ``random``
    array of length ``horizon``; step ``t`` picks the joint outcome
    ``(a, s')`` from row ``s`` by inverse CDF with the ``t``-th uniform.
    """
    if int(horizon) < 1:
        raise ArgumentError("horizon must be >= 1")
    if inv_temperature <= 0:
        raise ArgumentError("inv_temperature must be positive")
    probs = _probs(policy)
    S, A = mdp.num_states, mdp.num_actions
    regularized = mdp.rewards - log_ratio(probs, mdp.prior) / inv_temperature
    joint = probs[:, :, None] * mdp.dense_transitions()
    cdfs = [np.cumsum(joint[s].ravel()).tolist() for s in range(S)]
    rewards = regularized.tolist()
    last = A * S - 1
    rng = np.random.Generator(np.random.PCG64(seed))
    s = int(rng.integers(S)) if start_state is None else int(start_state)
    # visit counts, summed once at the end, keep constant streams exact
    counts = [[0] * A for _ in range(S)]
    for u in rng.random(int(horizon)).tolist():
        k = bisect.bisect_right(cdfs[s], u)
        if k > last:
            k = last
        a, nxt = divmod(k, S)
        counts[s][a] += 1
        s = nxt
    total = math.fsum(c * r for row_c, row_r in zip(counts, rewards) for c, r in zip(row_c, row_r) if c)
    return total / int(horizon)
