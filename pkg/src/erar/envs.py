"""Built-in continuing-control environments.

All environments share a tiny interface: ``reset(seed=None) -> obs``,
``step(action) -> (obs, reward, terminated)`` and a ``spec`` attribute.
Each owns a ``numpy.random.Generator(PCG64)``; ``reset(seed)`` reseeds it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError
from .mdp import TabularMdp, TabularPolicy, make_random_mdp

PENDULUM_GRAVITY = 10.0
PENDULUM_MASS = 1.0
PENDULUM_LENGTH = 1.0
PENDULUM_DT = 0.05
PENDULUM_MAX_TORQUE = 2.0
PENDULUM_MAX_SPEED = 8.0
PENDULUM_COST = (1.0, 0.1, 0.001)


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    reward_bounds: tuple
    has_termination: bool
    initial: str
    num_actions: int | None = None

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1:
            raise ArgumentError("dimensions must be positive")
        lo, hi = self.reward_bounds
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ArgumentError("reward bounds must be finite")


class _Env:
    spec: EnvSpec

    def __init__(self, seed=None):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.clipped_actions = 0

    def _clip(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(self.spec.action_dim)
        clipped = np.clip(a, -1.0, 1.0)
        if np.any(clipped != a):
            self.clipped_actions += 1
        return clipped

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.Generator(np.random.PCG64(seed))
        return self._reset()

    # rng state round-trips through checkpoints
    def get_state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "clipped_actions": self.clipped_actions}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.clipped_actions = state["clipped_actions"]


# -- tabular MDP as a continuous-action task -------------------------------


def bin_edges(num_actions: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, num_actions + 1)


def decode_action(action, num_actions: int) -> int:
    """Equal-width bin of ``(-1, 1)`` containing the first action coordinate."""
    a = float(np.asarray(action, dtype=float).ravel()[0])
    return min(max(int(math.floor((a + 1.0) * 0.5 * num_actions)), 0), num_actions - 1)


def encode_action(index: int, num_actions: int) -> np.ndarray:
    """Center of bin ``index``."""
    return np.array([-1.0 + (2 * index + 1) / num_actions])


class TabularEmbeddedEnv(_Env):
    """A :class:`TabularMdp` with one-hot observations and binned 1-D actions."""

    def __init__(self, mdp: TabularMdp, initial=None, seed=None):
        super().__init__(seed)
        self.mdp = mdp
        S, A = mdp.num_states, mdp.num_actions
        self.initial = np.full(S, 1.0 / S) if initial is None else np.asarray(initial, dtype=float)
        if self.initial.shape != (S,) or abs(self.initial.sum() - 1.0) > 1e-12:
            raise ArgumentError("initial distribution must be a probability vector over states")
        self._next_cdf = np.cumsum(mdp.dense_transitions(), axis=2)
        self._init_cdf = np.cumsum(self.initial)
        lo, hi = float(mdp.rewards.min()), float(mdp.rewards.max())
        self.spec = EnvSpec(S, 1, (lo, hi), False, "tabular initial distribution", num_actions=A)
        self.state = 0

    def observe(self, state: int | None = None) -> np.ndarray:
        obs = np.zeros(self.mdp.num_states)
        obs[self.state if state is None else state] = 1.0
        return obs

    def state_of(self, obs) -> int:
        return int(np.argmax(np.asarray(obs)))

    def default_anchor(self):
        """Observation/action pair matching state-action ``(0, 0)`` of the MDP."""
        return self.observe(0), encode_action(0, self.mdp.num_actions)

    def _reset(self):
        self.state = min(int(np.searchsorted(self._init_cdf, self.rng.random(), side="right")),
                         self.mdp.num_states - 1)
        return self.observe()

    def step(self, action):
        a = decode_action(self._clip(action), self.mdp.num_actions)
        s = self.state
        reward = float(self.mdp.rewards[s, a])
        nxt = int(np.searchsorted(self._next_cdf[s, a], self.rng.random(), side="right"))
        self.state = min(nxt, self.mdp.num_states - 1)
        return self.observe(), reward, False

    def get_state(self):
        return {**super().get_state(), "state": self.state}

    def set_state(self, state):
        super().set_state(state)
        self.state = state["state"]


def ring_mdp(num_states: int = 6) -> TabularMdp:
    """Deterministic ring: actions move left, stay or move right; reward 1 at state 0."""
    S, A = num_states, 3
    P = np.zeros((S, A, S))
    for s in range(S):
        for a, move in enumerate((-1, 0, 1)):
            P[s, a, (s + move) % S] = 1.0
    r = np.zeros((S, A))
    r[0, :] = 1.0
    return TabularMdp(S, A, P, r)


# -- pendulum --------------------------------------------------------------


def wrap_angle(theta):
    """Map angles to ``[-pi, pi)``."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def pendulum_step(theta, velocity, torque, gravity=PENDULUM_GRAVITY, dt=PENDULUM_DT):
    """One velocity-Verlet step of ``theta'' = (g/l) sin(theta) + u/(m l^2)``.

    ``theta = 0`` is upright.  The torque is held constant over the step and
    the speed is clipped to ``PENDULUM_MAX_SPEED`` afterwards.
    """
    inertia = PENDULUM_MASS * PENDULUM_LENGTH ** 2
    g_l = gravity / PENDULUM_LENGTH
    acc = g_l * np.sin(theta) + torque / inertia
    half = velocity + 0.5 * dt * acc
    new_theta = theta + dt * half
    new_velocity = half + 0.5 * dt * (g_l * np.sin(new_theta) + torque / inertia)
    new_velocity = np.clip(new_velocity, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    return wrap_angle(new_theta), new_velocity


def pendulum_reward(theta, velocity, torque, weights=PENDULUM_COST):
    wa, wv, wu = weights
    return -(wa * wrap_angle(theta) ** 2 + wv * velocity ** 2 + wu * torque ** 2)


def pendulum_energy(theta, velocity, gravity=PENDULUM_GRAVITY):
    """Mechanical energy per unit inertia, zero when hanging at rest."""
    return 0.5 * velocity ** 2 + gravity / PENDULUM_LENGTH * (1.0 + np.cos(theta))


class PendulumEnv(_Env):
    """Torque-limited swing-up; never terminates.  Observation ``[cos, sin, v/8]``."""

    def __init__(self, seed=None, gravity=PENDULUM_GRAVITY):
        super().__init__(seed)
        self.gravity = gravity
        worst = math.pi ** 2 + 0.1 * PENDULUM_MAX_SPEED ** 2 + 0.001 * PENDULUM_MAX_TORQUE ** 2
        self.spec = EnvSpec(3, 1, (-worst, 0.0), False, "angle ~ U[-pi, pi), velocity 0")
        self.theta = 0.0
        self.velocity = 0.0

    def observe(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.velocity / PENDULUM_MAX_SPEED])

    def _reset(self):
        self.theta = float(wrap_angle(self.rng.uniform(-np.pi, np.pi)))
        self.velocity = 0.0
        return self.observe()

    def step(self, action):
        u = PENDULUM_MAX_TORQUE * float(self._clip(action)[0])
        reward = float(pendulum_reward(self.theta, self.velocity, u))
        th, v = pendulum_step(self.theta, self.velocity, u, self.gravity)
        self.theta, self.velocity = float(th), float(v)
        return self.observe(), reward, False

    def get_state(self):
        return {**super().get_state(), "theta": self.theta, "velocity": self.velocity}

    def set_state(self, state):
        super().set_state(state)
        self.theta, self.velocity = state["theta"], state["velocity"]


class PointMassEnv(_Env):
    """2-D point mass; reward ``-|x|^2``; terminates once ``|x|_inf > 1``."""

    STEP = 0.1
    RESET_HALF_WIDTH = 0.5

    def __init__(self, seed=None, dim=2):
        super().__init__(seed)
        self.dim = dim
        self.spec = EnvSpec(dim, dim, (-float(dim) * 1.21, 0.0), True,
                            f"position ~ U[-{self.RESET_HALF_WIDTH}, {self.RESET_HALF_WIDTH}]^{dim}")
        self.position = np.zeros(dim)

    def _reset(self):
        self.position = self.rng.uniform(-self.RESET_HALF_WIDTH, self.RESET_HALF_WIDTH, size=self.dim)
        return self.position.copy()

    def step(self, action):
        self.position = self.position + self.STEP * self._clip(action)
        reward = -float(self.position @ self.position)
        terminated = bool(np.max(np.abs(self.position)) > 1.0)
        return self.position.copy(), reward, terminated

    def get_state(self):
        return {**super().get_state(), "position": self.position.tolist()}

    def set_state(self, state):
        super().set_state(state)
        self.position = np.array(state["position"], dtype=float)


def make_env(name: str, seed=None):
    """Build an environment from its config name.

    ``ring``, ``random_tabular:<seed>:<S>:<A>``, ``pendulum``, ``pointmass``.
    """
    if name == "ring":
        return TabularEmbeddedEnv(ring_mdp(), seed=seed)
    if name.startswith("random_tabular"):
        parts = name.split(":")
        if len(parts) != 4:
            raise ArgumentError("expected random_tabular:<seed>:<S>:<A>")
        try:
            mdp_seed, S, A = (int(p) for p in parts[1:])
        except ValueError:
            raise ArgumentError(f"non-integer field in env name {name!r}") from None
        return TabularEmbeddedEnv(make_random_mdp(mdp_seed, S, A), seed=seed)
    if name == "pendulum":
        return PendulumEnv(seed=seed)
    if name == "pointmass":
        return PointMassEnv(seed=seed)
    raise ArgumentError(f"unknown environment {name!r}")


def tabular_mdp_for(name: str) -> TabularMdp:
    """The exact model behind a tabular env name."""
    env = make_env(name)
    if not isinstance(env, TabularEmbeddedEnv):
        raise ArgumentError(f"{name!r} is not a tabular environment")
    return env.mdp


# -- pendulum discretization -------------------------------------------------


@dataclass(frozen=True)
class PendulumGrid:
    thetas: np.ndarray
    velocities: np.ndarray
    torques: np.ndarray

    def index(self, i_theta, i_vel):
        return np.asarray(i_theta) * len(self.velocities) + np.asarray(i_vel)

    @property
    def reset_states(self) -> np.ndarray:
        """Grid states of the reset distribution (any angle, zero velocity)."""
        j0 = int(np.argmin(np.abs(self.velocities)))
        return self.index(np.arange(len(self.thetas)), j0)


def pendulum_grid(grid_theta: int, grid_vel: int, grid_torque: int) -> PendulumGrid:
    thetas = -np.pi + 2 * np.pi * np.arange(grid_theta) / grid_theta
    dv = 2 * PENDULUM_MAX_SPEED / grid_vel
    velocities = (np.arange(grid_vel) - grid_vel // 2) * dv
    torques = PENDULUM_MAX_TORQUE * (-1.0 + (2 * np.arange(grid_torque) + 1) / grid_torque)
    return PendulumGrid(thetas, velocities, torques)


def discretize_pendulum(grid_theta: int = 64, grid_vel: int = 64, grid_torque: int = 64,
                        gravity: float = PENDULUM_GRAVITY, cost_weights=PENDULUM_COST) -> TabularMdp:
    """Grid MDP of the pendulum for the exact solvers.

    Angles are a periodic grid containing 0 and -pi, velocities a uniform grid
    over ``[-8, 8)`` containing 0, torques the centers of equal-width action
    bins (so the uniform discrete prior matches the uniform continuous one).
    Each continuous successor is split bilinearly over its four surrounding
    grid points, so every transition lands on the grid.
    """
    if min(grid_theta, grid_vel, grid_torque) < 8:
        raise ArgumentError("grids must have at least 8 points per axis")
    grid = pendulum_grid(grid_theta, grid_vel, grid_torque)
    nt, nv, nu = grid_theta, grid_vel, grid_torque
    th, vel, tq = np.meshgrid(grid.thetas, grid.velocities, grid.torques, indexing="ij")
    rewards = pendulum_reward(th, vel, tq, cost_weights).reshape(nt * nv, nu)
    th2, v2 = pendulum_step(th, vel, tq, gravity)

    dth = 2 * np.pi / nt
    ft = (th2 + np.pi) / dth
    i0 = np.floor(ft).astype(int)
    wt = ft - i0
    i0 %= nt
    i1 = (i0 + 1) % nt

    dv = grid.velocities[1] - grid.velocities[0]
    fv = np.clip((v2 - grid.velocities[0]) / dv, 0.0, nv - 1)
    j0 = np.minimum(np.floor(fv).astype(int), nv - 2)
    wv = fv - j0
    j1 = j0 + 1

    rows = np.arange(nt * nv * nu).reshape(nt, nv, nu)
    row_idx, col_idx, vals = [], [], []
    for ii, wi in ((i0, 1 - wt), (i1, wt)):
        for jj, wj in ((j0, 1 - wv), (j1, wv)):
            row_idx.append(rows.ravel())
            col_idx.append((ii * nv + jj).ravel())
            vals.append((wi * wj).ravel())
    P = sp.coo_matrix((np.concatenate(vals), (np.concatenate(row_idx), np.concatenate(col_idx))),
                      shape=(nt * nv * nu, nt * nv)).tocsr()
    P.sum_duplicates()
    P.eliminate_zeros()
    row_sums = np.asarray(P.sum(axis=1)).ravel()
    P = sp.diags(1.0 / row_sums) @ P
    S = nt * nv
    return TabularMdp(S, nu, P.tocsr(), rewards, TabularPolicy.uniform(S, nu))
