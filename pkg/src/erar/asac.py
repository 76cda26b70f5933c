"""Average-reward soft actor-critic on numpy networks.

One gradient step, in order: sample a batch, update the adaptive reset
penalty, build critic targets from the target critics, update both critics,
update the actor against the online critics, update the learned reward rate,
then Polyak-average the targets.  Critic values are always used centered, i.e.
minus the same network's value at the anchor observation-action pair.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .envs import TabularEmbeddedEnv, bin_edges, decode_action
from .errors import ArgumentError, NumericError
from .nn import (
    HALF_LOG_2PI,
    AdamState,
    GaussianHead,
    Mlp,
    adam_step,
    clip_grad_norm,
    polyak_update,
    sample_squashed,
    squash_correction,
    squashed_backward,
    squashed_log_prob,
)

CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "theta", "critic_loss", "actor_loss", "theta_loss",
              "reset_penalty", "eval_return", "eval_rate", "wall_ms")


@dataclass
class TrainerConfig:
    env: str = "pendulum"
    inv_temperature: float = 5.0
    lr_actor: float = 1e-4
    lr_critic: float = 5e-4
    lr_theta: float = 5e-3
    tau: float = 0.005
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    reset_scale: float = 10.0
    grad_clip: float = 10.0
    anchor_obs: list | None = None
    anchor_action: list | None = None
    train_freq: int = 1
    gradient_steps: int = 1
    seed: int = 0
    total_steps: int = 200_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    eval_episode_len: int = 1_000
    hidden_sizes: list = field(default_factory=lambda: [64, 64])
    learning_starts: int = 1_000
    target_samples: int = 1
    prior: str = "uniform"
    reset_mean: str = "nonterminal"
    log_wall_time: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr_actor", "lr_critic", "lr_theta", "tau"):
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                raise ArgumentError(f"{name} must lie in (0, 1), got {value}")
        if self.inv_temperature <= 0:
            raise ArgumentError("inv_temperature must be positive")
        for name in ("batch_size", "buffer_capacity", "train_freq", "target_samples",
                     "eval_interval", "eval_episodes", "eval_episode_len"):
            if int(getattr(self, name)) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if self.gradient_steps < 0 or self.total_steps < 0 or self.learning_starts < 0:
            raise ArgumentError("step counts must be non-negative")
        if self.grad_clip <= 0 or self.reset_scale < 0:
            raise ArgumentError("grad_clip must be positive and reset_scale non-negative")
        if self.prior not in PRIORS:
            raise ArgumentError(f"prior must be one of {sorted(PRIORS)}")
        if self.reset_mean not in ("nonterminal", "all"):
            raise ArgumentError("reset_mean must be 'nonterminal' or 'all'")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden_sizes"] = list(self.hidden_sizes)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ArgumentError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainerConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"malformed config {path} at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)


# -- priors over squashed actions ------------------------------------------


class UniformPrior:
    """Uniform density on ``(-1, 1)^d``."""

    name = "uniform"

    def log_prob(self, action, pre_squash=None) -> np.ndarray:
        a = np.asarray(action)
        return np.full(a.shape[:-1], -a.shape[-1] * math.log(2.0))

    def grad_pre_squash(self, action, pre_squash) -> np.ndarray:
        return np.zeros_like(np.asarray(action, dtype=float))

    def bin_masses(self, num_actions: int) -> np.ndarray:
        return np.diff(bin_edges(num_actions)) / 2.0


class GaussianPrior:
    """``tanh`` of a standard normal, with the same squash correction as the actor."""

    name = "gaussian"

    def log_prob(self, action, pre_squash=None) -> np.ndarray:
        a = np.asarray(action, dtype=float)
        u = np.arctanh(a) if pre_squash is None else np.asarray(pre_squash)
        return np.sum(-0.5 * u * u - HALF_LOG_2PI, axis=-1) - squash_correction(a)

    def grad_pre_squash(self, action, pre_squash) -> np.ndarray:
        a = np.asarray(action)
        one_minus = 1.0 - a * a
        return -np.asarray(pre_squash) + 2.0 * a * one_minus / (one_minus + 1e-6)

    def bin_masses(self, num_actions: int) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.diff(ndtr(np.arctanh(bin_edges(num_actions))))


PRIORS = {"uniform": UniformPrior, "gaussian": GaussianPrior}


def make_prior(name: str):
    try:
        return PRIORS[name]()
    except KeyError:
        raise ArgumentError(f"unknown prior {name!r}") from None


# -- policies ----------------------------------------------------------------


class Actor:
    """Squashed-Gaussian policy on top of an :class:`Mlp`."""

    def __init__(self, obs_dim: int, action_dim: int, hidden_sizes=(64, 64), seed=None):
        self.head = GaussianHead(action_dim)
        self.net = Mlp([obs_dim, *hidden_sizes, self.head.output_dim], seed=seed)

    @property
    def action_dim(self) -> int:
        return self.head.action_dim

    def forward_sample(self, obs, noise):
        out, cache = self.net.forward_cache(obs)
        return sample_squashed(self.head, out, noise), cache

    def sample(self, obs, rng: np.random.Generator):
        obs = np.atleast_2d(obs)
        noise = rng.standard_normal((obs.shape[0], self.action_dim))
        s = sample_squashed(self.head, self.net.forward(obs), noise)
        return s.action, s.log_prob, s.pre_squash

    def log_prob(self, obs, action) -> np.ndarray:
        return squashed_log_prob(self.head, self.net.forward(np.atleast_2d(obs)), action)

    def act(self, obs, rng, deterministic=False) -> np.ndarray:
        out = self.net.forward(np.asarray(obs)[None, :])
        if deterministic:
            return np.tanh(self.head.split(out)[0][0])
        noise = rng.standard_normal((1, self.action_dim))
        return sample_squashed(self.head, out, noise).action[0]

    def bin_masses(self, obs, num_actions: int) -> np.ndarray:
        """Probability of each equal-width bin of the first action coordinate."""
        mean, log_std, _ = self.head.split(self.net.forward(np.atleast_2d(obs)))
        with np.errstate(divide="ignore"):
            z = (np.arctanh(bin_edges(num_actions))[None, :] - mean[:, :1]) / np.exp(log_std[:, :1])
        return np.diff(ndtr(z), axis=1)


class TabularActor:
    """Piecewise-uniform density that puts ``pi(i|s)`` on bin ``i``.

    Lets exact tabular policies drive the continuous-action code paths.
    """

    def __init__(self, probs, num_actions: int | None = None):
        self.probs = np.asarray(getattr(probs, "probs", probs), dtype=float)
        self.num_actions = self.probs.shape[1] if num_actions is None else num_actions
        self.width = 2.0 / self.num_actions
        self.action_dim = 1

    def _states(self, obs):
        return np.argmax(np.atleast_2d(obs), axis=1)

    def sample(self, obs, rng: np.random.Generator):
        states = self._states(obs)
        cdf = np.cumsum(self.probs[states], axis=1)
        u = rng.random(len(states))
        bins = np.minimum((u[:, None] > cdf).sum(axis=1), self.num_actions - 1)
        action = (-1.0 + self.width * (bins + rng.random(len(states))))[:, None]
        action = np.clip(action, -1 + 1e-12, 1 - 1e-12)
        with np.errstate(divide="ignore"):
            logp = np.log(self.probs[states, bins] / self.width)
        return action, logp, np.arctanh(action)

    def log_prob(self, obs, action) -> np.ndarray:
        states = self._states(obs)
        bins = np.array([decode_action(a, self.num_actions) for a in np.atleast_2d(action)])
        with np.errstate(divide="ignore"):
            return np.log(self.probs[states, bins] / self.width)

    def act(self, obs, rng, deterministic=False) -> np.ndarray:
        s = int(np.argmax(obs))
        if deterministic:
            i = int(np.argmax(self.probs[s]))
            return np.array([-1.0 + self.width * (i + 0.5)])
        action, _, _ = self.sample(np.asarray(obs)[None, :], rng)
        return action[0]


class TabularCritic:
    """Frozen critic ``Q[s, bin(a)]``, optionally smoothed across bin edges.

    With ``smoothing > 0`` each step between adjacent bins becomes a logistic
    ramp of that width, which gives the reparameterized actor gradient
    something to follow.
    """

    def __init__(self, q, smoothing: float = 0.0):
        self.q = np.asarray(q, dtype=float)
        self.num_states, self.num_actions = self.q.shape
        self.smoothing = smoothing
        self.inner_edges = bin_edges(self.num_actions)[1:-1]

    def _split(self, x):
        x = np.atleast_2d(x)
        return np.argmax(x[:, :self.num_states], axis=1), x[:, self.num_states]

    def forward(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        states, a = self._split(x)
        steps = np.diff(self.q[states], axis=1)
        if self.smoothing > 0:
            z = (a[:, None] - self.inner_edges[None, :]) / self.smoothing
            ramp = 0.5 * (1.0 + np.tanh(0.5 * z))
        else:
            ramp = (a[:, None] >= self.inner_edges[None, :]).astype(float)
        out = self.q[states, 0] + np.sum(steps * ramp, axis=1)
        return out[:, None], (np.atleast_2d(x), states, ramp, steps)

    def backward(self, cache, output_grad, param_grads=True):
        x, states, ramp, steps = cache
        g_in = np.zeros_like(x)
        if self.smoothing > 0:
            dramp = ramp * (1.0 - ramp) / self.smoothing
            g_in[:, self.num_states] = np.asarray(output_grad)[:, 0] * np.sum(steps * dramp, axis=1)
        return None, g_in


# -- replay buffer -------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminated: bool


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ArgumentError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.terminated = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def add(self, transition: Transition) -> None:
        values = (transition.state, transition.action, transition.reward, transition.next_state)
        if not all(np.all(np.isfinite(v)) for v in values):
            raise NumericError("refusing to store a non-finite transition")
        i = self.cursor
        self.obs[i] = transition.state
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.next_obs[i] = transition.next_state
        self.terminated[i] = transition.terminated
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_first(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def batch(self, idx) -> dict:
        return {
            "obs": self.obs[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_obs": self.next_obs[idx],
            "terminated": self.terminated[idx],
        }

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size == 0:
            raise ArgumentError("cannot sample from an empty buffer")
        return self.batch(rng.integers(self.size, size=batch_size))


def make_batch(obs, actions, rewards, next_obs, terminated=None) -> dict:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n = obs.shape[0]
    return {
        "obs": obs,
        "actions": np.asarray(actions, dtype=float).reshape(n, -1),
        "rewards": np.asarray(rewards, dtype=float).reshape(n),
        "next_obs": np.asarray(next_obs, dtype=float).reshape(n, -1),
        "terminated": np.zeros(n, dtype=bool) if terminated is None else np.asarray(terminated, dtype=bool),
    }


# -- critic helpers ------------------------------------------------------------


@dataclass(frozen=True)
class Anchor:
    obs: np.ndarray
    action: np.ndarray

    @property
    def input(self) -> np.ndarray:
        return np.concatenate([self.obs, self.action])[None, :]


def critic_input(obs, actions) -> np.ndarray:
    return np.concatenate([np.atleast_2d(obs), np.atleast_2d(actions)], axis=1)


def centered_q(critic, obs, actions, anchor: Anchor) -> np.ndarray:
    """``Q(s, a) - Q(anchor)`` from one forward pass of the same network."""
    x = np.vstack([critic_input(obs, actions), anchor.input])
    out = critic.forward(x)[:, 0]
    return out[:-1] - out[-1]


def pessimistic_q(obs, actions, critics, anchor: Anchor) -> np.ndarray:
    return np.min([centered_q(c, obs, actions, anchor) for c in critics], axis=0)


# -- trainer state ---------------------------------------------------------------


@dataclass
class TrainerState:
    actor: Actor
    critics: list
    targets: list
    actor_opt: AdamState
    critic_opts: list
    theta: np.ndarray
    theta_opt: AdamState
    penalty: float
    buffer: ReplayBuffer
    rng: np.random.Generator
    prior: object
    anchor: Anchor
    step: int = 0
    obs: np.ndarray | None = None
    env_state: dict | None = None
    accum: dict = field(default_factory=dict)

    @property
    def theta_value(self) -> float:
        return float(self.theta[0])


def init_state(env, config: TrainerConfig) -> TrainerState:
    """Fresh networks and optimizers; all randomness derives from ``config.seed``."""
    spec = env.spec
    seeds = np.random.SeedSequence(config.seed).generate_state(5)
    actor = Actor(spec.obs_dim, spec.action_dim, config.hidden_sizes, seed=int(seeds[0]))
    critic_sizes = [spec.obs_dim + spec.action_dim, *config.hidden_sizes, 1]
    critics = [Mlp(critic_sizes, seed=int(seeds[1])), Mlp(critic_sizes, seed=int(seeds[2]))]
    targets = [c.copy() for c in critics]
    anchor = resolve_anchor(env, config)
    theta = np.zeros(1)
    return TrainerState(
        actor=actor,
        critics=critics,
        targets=targets,
        actor_opt=AdamState.for_params(actor.net.params, config.lr_actor),
        critic_opts=[AdamState.for_params(c.params, config.lr_critic) for c in critics],
        theta=theta,
        theta_opt=AdamState.for_params([theta], config.lr_theta),
        penalty=0.0,
        buffer=ReplayBuffer(config.buffer_capacity, spec.obs_dim, spec.action_dim),
        rng=np.random.Generator(np.random.PCG64(int(seeds[3]))),
        prior=make_prior(config.prior),
        anchor=anchor,
        env_state={"reset_seed": int(seeds[4])},
    )


def resolve_anchor(env, config: TrainerConfig) -> Anchor:
    """Anchor from the config, else the env's own default, else all zeros."""
    spec = env.spec
    if hasattr(env, "default_anchor"):
        default_obs, default_act = env.default_anchor()
    else:
        default_obs, default_act = np.zeros(spec.obs_dim), np.zeros(spec.action_dim)
    obs = default_obs if config.anchor_obs is None else np.asarray(config.anchor_obs, dtype=float)
    act = default_act if config.anchor_action is None else np.asarray(config.anchor_action, dtype=float)
    if obs.shape != (spec.obs_dim,) or act.shape != (spec.action_dim,):
        raise ArgumentError("anchor dimensions do not match the environment")
    return Anchor(obs, act)


# -- the five update rules ----------------------------------------------------------


def adaptive_reset_penalty(penalty: float, batch: dict, config: TrainerConfig) -> float:
    """``p <- (1 - tau) p + tau * p0 * mean(reward)`` over non-terminal rows (or all rows)."""
    rewards = batch["rewards"]
    if config.reset_mean == "nonterminal":
        rewards = rewards[~batch["terminated"]]
    target = config.reset_scale * float(np.mean(rewards)) if len(rewards) else 0.0
    return (1.0 - config.tau) * penalty + config.tau * target


def penalized_rewards(batch: dict, penalty: float) -> np.ndarray:
    return batch["rewards"] - penalty * batch["terminated"]


def critic_target(batch: dict, actor, targets, theta: float, penalty: float, config: TrainerConfig,
                  rng: np.random.Generator, prior, anchor: Anchor) -> np.ndarray:
    """``r - p*terminated - theta + min_j Qbar_j(s', a') - (log pi(a'|s') - log pi0(a'))/beta``.

    The expectation over ``a'`` uses ``config.target_samples`` draws.
    """
    next_obs = batch["next_obs"]
    n = next_obs.shape[0]
    k = int(config.target_samples)
    tiled = np.repeat(next_obs, k, axis=0)
    a_next, logp, u = actor.sample(tiled, rng)
    soft_q = pessimistic_q(tiled, a_next, targets, anchor) - (logp - prior.log_prob(a_next, u)) / config.inv_temperature
    soft_v = soft_q.reshape(n, k).mean(axis=1)
    y = penalized_rewards(batch, penalty) - theta + soft_v
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite critic target")
    return y


def critic_update(state: TrainerState, batch: dict, targets_y: np.ndarray, config: TrainerConfig) -> float:
    """One clipped Adam step per critic on ``mean((centered Q - y)^2)``; returns the mean loss."""
    x = np.vstack([critic_input(batch["obs"], batch["actions"]), state.anchor.input])
    n = x.shape[0] - 1
    losses = []
    for critic, opt in zip(state.critics, state.critic_opts):
        out, cache = critic.forward_cache(x)
        centered = out[:-1, 0] - out[-1, 0]
        residual = centered - targets_y
        loss = float(np.mean(residual ** 2))
        if not math.isfinite(loss):
            raise NumericError("non-finite critic loss")
        g = np.empty((n + 1, 1))
        g[:-1, 0] = 2.0 * residual / n
        g[-1, 0] = -np.sum(g[:-1, 0])
        grads, _ = critic.backward(cache, g)
        adam_step(opt, critic.params, clip_grad_norm(grads, config.grad_clip))
        losses.append(loss)
    return float(np.mean(losses))


def actor_loss_and_grads(state: TrainerState, obs: np.ndarray, noise: np.ndarray, config: TrainerConfig):
    """Loss ``mean[log pi - log pi0 - min_j centered Q_j / beta]`` and its actor gradients.

    Gradients flow through the reparameterized action into the critics'
    inputs; critic parameters are left untouched.
    """
    beta = config.inv_temperature
    sample, cache = state.actor.forward_sample(obs, noise)
    n = obs.shape[0]
    x = np.vstack([critic_input(obs, sample.action), state.anchor.input])
    qs, caches = [], []
    for critic in state.critics:
        out, c_cache = critic.forward_cache(x)
        qs.append(out[:-1, 0] - out[-1, 0])
        caches.append(c_cache)
    qs = np.array(qs)
    pick = np.argmin(qs, axis=0)
    q_min = qs[pick, np.arange(n)]
    prior_lp = state.prior.log_prob(sample.action, sample.pre_squash)
    loss = float(np.mean(sample.log_prob - prior_lp - q_min / beta))
    if not math.isfinite(loss):
        raise NumericError("non-finite actor loss")

    obs_dim = obs.shape[1]
    grad_action = np.zeros_like(sample.action)
    for j, (critic, c_cache) in enumerate(zip(state.critics, caches)):
        rows = pick == j
        if not np.any(rows):
            continue
        g = np.zeros((n + 1, 1))
        g[:-1, 0] = np.where(rows, -1.0 / (beta * n), 0.0)
        _, g_in = critic.backward(c_cache, g, param_grads=False)
        grad_action += g_in[:-1, obs_dim:]
    grad_pre = -state.prior.grad_pre_squash(sample.action, sample.pre_squash) / n
    g_out = squashed_backward(sample, grad_action=grad_action,
                              grad_log_prob=np.full(n, 1.0 / n), grad_pre_squash=grad_pre)
    grads, _ = state.actor.net.backward(cache, g_out)
    return loss, grads


def actor_update(state: TrainerState, batch: dict, config: TrainerConfig) -> float:
    obs = batch["obs"]
    noise = state.rng.standard_normal((obs.shape[0], state.actor.action_dim))
    loss, grads = actor_loss_and_grads(state, obs, noise, config)
    adam_step(state.actor_opt, state.actor.net.params, grads)
    return loss


def theta_target(state: TrainerState, batch: dict, config: TrainerConfig) -> float:
    """Batch mean of ``r - log(pi(a|s)/pi0(a|s))/beta`` at the stored actions, current actor."""
    actions = batch["actions"]
    logp = state.actor.log_prob(batch["obs"], actions)
    lp0 = state.prior.log_prob(np.clip(actions, -1 + 1e-12, 1 - 1e-12))
    rewards = penalized_rewards(batch, state.penalty)
    target = float(np.mean(rewards - (logp - lp0) / config.inv_temperature))
    if not math.isfinite(target):
        raise NumericError("non-finite reward-rate target")
    return target


def theta_update(state: TrainerState, batch: dict, config: TrainerConfig) -> float:
    """One Adam step on ``(theta - theta_bar)^2``; returns the loss before the step."""
    target = theta_target(state, batch, config)
    diff = state.theta[0] - target
    adam_step(state.theta_opt, [state.theta], [np.array([2.0 * diff])])
    return float(diff * diff)


def gradient_step(state: TrainerState, config: TrainerConfig) -> dict:
    batch = state.buffer.sample(config.batch_size, state.rng)
    state.penalty = adaptive_reset_penalty(state.penalty, batch, config)
    y = critic_target(batch, state.actor, state.targets, state.theta_value, state.penalty, config,
                      state.rng, state.prior, state.anchor)
    critic_loss = critic_update(state, batch, y, config)
    actor_loss = actor_update(state, batch, config)
    theta_loss = theta_update(state, batch, config)
    for target, online in zip(state.targets, state.critics):
        polyak_update(target, online, config.tau)
    return {"critic_loss": critic_loss, "actor_loss": actor_loss, "theta_loss": theta_loss}


# -- evaluation --------------------------------------------------------------------


def evaluate(actor, env, episodes: int = 10, episode_len: int = 1000, seed: int = 0,
             deterministic: bool = False, inv_temperature: float | None = None, prior=None) -> dict:
    """Roll out ``episodes`` episodes; mean return, mean per-step reward and standard errors.

    An episode ends after ``episode_len`` steps or at termination.  The
    environment is reseeded per episode, so results depend only on ``seed``.
    Given ``inv_temperature``, the per-step entropy-regularized reward
    ``r - (log pi(a|s) - log pi0(a)) / beta`` is averaged as well
    (``mean_regularized_rate``), under ``prior`` (uniform by default).
    """
    if episodes < 1:
        raise ArgumentError("episodes must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    episode_seeds = rng.integers(2 ** 63, size=episodes)
    regularize = inv_temperature is not None
    prior = UniformPrior() if prior is None else prior
    returns, rates, reg_rates = [], [], []
    for ep_seed in episode_seeds:
        obs = env.reset(seed=int(ep_seed))
        total, reg_total, steps = 0.0, 0.0, 0
        for _ in range(episode_len):
            action = actor.act(obs, rng, deterministic)
            if regularize:
                clipped = np.clip(action, -1 + 1e-12, 1 - 1e-12)[None, :]
                log_ratio = actor.log_prob(obs[None, :], clipped)[0] - prior.log_prob(clipped)[0]
                reg_total -= log_ratio / inv_temperature
            obs, reward, terminated = env.step(action)
            total += reward
            steps += 1
            if terminated:
                break
        returns.append(total)
        rates.append(total / steps)
        reg_rates.append((total + reg_total) / steps)
    returns, rates = np.array(returns), np.array(rates)

    def stderr(x):
        return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

    result = {
        "mean_return": float(returns.mean()),
        "mean_rate": float(rates.mean()),
        "stderr": stderr(returns),
        "rate_stderr": stderr(rates),
        "returns": returns.tolist(),
        "rates": rates.tolist(),
    }
    if regularize:
        result["mean_regularized_rate"] = float(np.mean(reg_rates))
        result["regularized_rate_stderr"] = stderr(np.array(reg_rates))
    return result


# -- training loop ---------------------------------------------------------------------


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def log_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for row in rows:
        writer.writerow([_format(row[k]) for k in LOG_FIELDS])
    return buf.getvalue()


def train(env, config: TrainerConfig, state: TrainerState | None = None, callback=None,
          checkpoint_path=None, eval_env=None):
    """Run the training loop until ``config.total_steps`` environment steps.

    Returns ``(state, log_rows)``.  Passing a state restored by
    :func:`load_checkpoint` resumes exactly where it stopped.  On a numeric
    failure the last checkpoint (written every ``eval_interval`` steps when
    ``checkpoint_path`` is set) is left in place and the error propagates.
    """
    config.validate()
    if state is None:
        state = init_state(env, config)
    if state.obs is None:
        state.obs = env.reset(seed=state.env_state["reset_seed"])
    elif "env" in state.env_state:
        env.set_state(state.env_state["env"])
    eval_env = copy.deepcopy(env) if eval_env is None else eval_env
    rows = []
    start = time.perf_counter()
    if not state.accum:
        state.accum = {"critic_loss": 0.0, "actor_loss": 0.0, "theta_loss": 0.0, "count": 0}
    while state.step < config.total_steps:
        obs = state.obs
        action = state.actor.act(obs, state.rng)
        next_obs, reward, terminated = env.step(action)
        if terminated:
            next_obs = env.reset()
        state.buffer.add(Transition(obs, action, reward, next_obs, terminated))
        state.obs = next_obs
        state.step += 1

        if state.step >= config.learning_starts and state.step % config.train_freq == 0:
            for _ in range(config.gradient_steps):
                losses = gradient_step(state, config)
                for k, v in losses.items():
                    state.accum[k] += v
                state.accum["count"] += 1
                if not math.isfinite(state.theta_value):
                    raise NumericError(f"reward rate diverged at step {state.step}")
        if callback is not None:
            callback(state)

        if state.step % config.eval_interval == 0:
            result = evaluate(state.actor, eval_env, config.eval_episodes, config.eval_episode_len,
                              seed=config.seed * 1_000_003 + state.step)
            count = max(state.accum["count"], 1)
            rows.append({
                "step": state.step,
                "theta": state.theta_value,
                "critic_loss": state.accum["critic_loss"] / count,
                "actor_loss": state.accum["actor_loss"] / count,
                "theta_loss": state.accum["theta_loss"] / count,
                "reset_penalty": float(state.penalty),
                "eval_return": result["mean_return"],
                "eval_rate": result["mean_rate"],
                "wall_ms": int(round((time.perf_counter() - start) * 1000)) if config.log_wall_time else 0,
            })
            state.accum = {"critic_loss": 0.0, "actor_loss": 0.0, "theta_loss": 0.0, "count": 0}
            if checkpoint_path is not None:
                state.env_state["env"] = env.get_state()
                save_checkpoint(checkpoint_path, state, config)
    state.env_state["env"] = env.get_state()
    return state, rows


# -- checkpoints ------------------------------------------------------------------------


def _adam_arrays(prefix: str, opt: AdamState, out: dict):
    out[f"{prefix}.m"] = np.concatenate([m.ravel() for m in opt.m])
    out[f"{prefix}.v"] = np.concatenate([v.ravel() for v in opt.v])


def _restore_adam(prefix: str, opt: AdamState, data, meta: dict):
    for key, target in (("m", opt.m), ("v", opt.v)):
        flat = data[f"{prefix}.{key}"]
        offset = 0
        for i, arr in enumerate(target):
            target[i] = flat[offset:offset + arr.size].reshape(arr.shape).copy()
            offset += arr.size
    opt.step = meta[prefix]


def save_checkpoint(path, state: TrainerState, config: TrainerConfig) -> None:
    """Write every array plus RNG and environment state to one ``.npz`` file, atomically."""
    arrays = {"actor": state.actor.net.get_flat(), "theta": state.theta.copy()}
    for j in range(2):
        arrays[f"critic{j}"] = state.critics[j].get_flat()
        arrays[f"target{j}"] = state.targets[j].get_flat()
        _adam_arrays(f"critic_opt{j}", state.critic_opts[j], arrays)
    _adam_arrays("actor_opt", state.actor_opt, arrays)
    _adam_arrays("theta_opt", state.theta_opt, arrays)
    order = state.buffer.oldest_first()
    for key, arr in (("obs", state.buffer.obs), ("actions", state.buffer.actions),
                     ("rewards", state.buffer.rewards), ("next_obs", state.buffer.next_obs),
                     ("terminated", state.buffer.terminated)):
        arrays[f"buffer.{key}"] = arr[order]
    arrays["current_obs"] = np.asarray(state.obs, dtype=float)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": state.step,
        "penalty": state.penalty,
        "rng": state.rng.bit_generator.state,
        "env_state": state.env_state,
        "accum": state.accum,
        "critic_opt0": state.critic_opts[0].step,
        "critic_opt1": state.critic_opts[1].step,
        "actor_opt": state.actor_opt.step,
        "theta_opt": state.theta_opt.step,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, env):
    """Inverse of :func:`save_checkpoint`; returns ``(state, config)``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ArgumentError(f"unsupported checkpoint version {meta.get('version')}")
        config = TrainerConfig.from_dict(meta["config"])
        state = init_state(env, config)
        state.actor.net.set_flat(data["actor"])
        state.theta[:] = data["theta"]
        for j in range(2):
            state.critics[j].set_flat(data[f"critic{j}"])
            state.targets[j].set_flat(data[f"target{j}"])
            _restore_adam(f"critic_opt{j}", state.critic_opts[j], data, meta)
        _restore_adam("actor_opt", state.actor_opt, data, meta)
        _restore_adam("theta_opt", state.theta_opt, data, meta)
        n = len(data["buffer.rewards"])
        buf = state.buffer
        buf.obs[:n] = data["buffer.obs"]
        buf.actions[:n] = data["buffer.actions"]
        buf.rewards[:n] = data["buffer.rewards"]
        buf.next_obs[:n] = data["buffer.next_obs"]
        buf.terminated[:n] = data["buffer.terminated"]
        buf.size = n
        buf.cursor = n % buf.capacity
        state.obs = np.array(data["current_obs"])
    state.step = meta["step"]
    state.penalty = meta["penalty"]
    state.rng.bit_generator.state = meta["rng"]
    state.env_state = meta["env_state"]
    state.accum = meta["accum"]
    return state, config


def tabular_policy_of(actor: Actor, env: TabularEmbeddedEnv) -> np.ndarray:
    """Bin masses of the actor at every state of a tabular-embedded env."""
    obs = np.eye(env.mdp.num_states)
    return actor.bin_masses(obs, env.mdp.num_actions)
