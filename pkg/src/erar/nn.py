"""Small numpy networks with hand-written backprop, Adam and a squashed-Gaussian head.

Arrays are batched along axis 0.  Parameters of an :class:`Mlp` live in the
flat list ``net.params = [W0, b0, W1, b1, ...]`` so optimizers, Polyak
averaging and clipping can treat every network the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, NumericError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
# keeps tanh outputs strictly inside (-1, 1) in float64
ACTION_LIMIT = 1.0 - 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Mlp:
    """Fully connected net, tanh on hidden layers, identity on the output."""

    def __init__(self, layer_sizes, seed=None, zero=False):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ArgumentError("an Mlp needs at least an input and an output size")
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            if zero:
                W, b = np.zeros((n_in, n_out)), np.zeros(n_out)
            else:
                W = rng.uniform(-bound, bound, size=(n_in, n_out))
                b = rng.uniform(-bound, bound, size=n_out)
            self.params += [W, b]

    @property
    def num_layers(self) -> int:
        return len(self.params) // 2

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.layer_sizes = list(self.layer_sizes)
        other.params = [p.copy() for p in self.params]
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.layer_sizes[0]:
            raise ArgumentError(f"expected input size {self.layer_sizes[0]}, got {x.shape[-1]}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        h = x
        last = self.num_layers - 1
        for i in range(self.num_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.tanh(h)
        return h

    def forward_cache(self, x):
        """Forward pass that also returns the activations needed by :meth:`backward`."""
        x = self._check_input(x)
        acts = [x]
        h = x
        last = self.num_layers - 1
        for i in range(self.num_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, cache, output_grad, param_grads=True):
        """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

        With ``param_grads=False`` only the input gradient is computed and the
        parameter list comes back as ``None``.
        """
        acts = cache
        g = np.asarray(output_grad, dtype=float)
        if g.shape != acts[-1].shape:
            raise ArgumentError(f"output_grad shape {g.shape} does not match output {acts[-1].shape}")
        grads = [None] * len(self.params)
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            inp = acts[i]
            if not param_grads:
                pass
            elif inp.ndim == 1:
                grads[2 * i] = np.outer(inp, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = inp.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return (grads if param_grads else None), g

    # -- flat serialization --------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.num_params:
            raise ArgumentError(f"expected {self.num_params} values, got {flat.size}")
        offset = 0
        for i, p in enumerate(self.params):
            self.params[i] = flat[offset:offset + p.size].reshape(p.shape).copy()
            offset += p.size


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, x, output_grad):
    """Parameter gradients of ``output . output_grad`` at input ``x``."""
    out, cache = net.forward_cache(x)
    if np.shape(output_grad) != out.shape:
        raise ArgumentError("output_grad does not match the network output")
    grads, _ = net.backward(cache, output_grad)
    return grads


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, **kwargs) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    if len(params) != len(grads):
        raise ArgumentError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at Adam step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, g in enumerate(grads):
        if np.shape(g) != np.shape(params[i]):
            raise ArgumentError("gradient shape does not match parameter shape")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[i] -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


def polyak_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if target.layer_sizes != online.layer_sizes:
        raise ArgumentError("target and online architectures differ")
    if not (0.0 <= tau <= 1.0):
        raise ArgumentError("tau must lie in [0, 1]")
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o
    return target


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads, max_norm: float):
    """Rescale so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ArgumentError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)


# -- squashed Gaussian head ------------------------------------------------


@dataclass(frozen=True)
class GaussianHead:
    """Interprets a net output of width ``2 d`` as ``[mean, log_std]``."""

    action_dim: int
    log_std_min: float = LOG_STD_MIN
    log_std_max: float = LOG_STD_MAX

    @property
    def output_dim(self) -> int:
        return 2 * self.action_dim

    def split(self, net_output):
        out = np.asarray(net_output, dtype=float)
        if out.shape[-1] != self.output_dim:
            raise ArgumentError(f"head expects {self.output_dim} outputs, got {out.shape[-1]}")
        d = self.action_dim
        mean = out[..., :d]
        raw = out[..., d:]
        log_std = np.clip(raw, self.log_std_min, self.log_std_max)
        return mean, log_std, raw


@dataclass
class SquashedSample:
    action: np.ndarray
    log_prob: np.ndarray
    pre_squash: np.ndarray
    noise: np.ndarray
    std: np.ndarray
    clamp_mask: np.ndarray


def gaussian_log_density(u, mean, log_std) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def squash(u):
    return np.clip(np.tanh(u), -ACTION_LIMIT, ACTION_LIMIT)


def squash_correction(action) -> np.ndarray:
    return np.sum(np.log(1.0 - action * action + SQUASH_EPS), axis=-1)


def sample_squashed(head: GaussianHead, net_output, noise) -> SquashedSample:
    """Reparameterized sample ``tanh(mean + std * noise)`` and its log-density."""
    mean, log_std, raw = head.split(net_output)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != mean.shape:
        raise ArgumentError(f"noise shape {noise.shape} does not match mean {mean.shape}")
    std = np.exp(log_std)
    u = mean + std * noise
    action = squash(u)
    log_prob = np.sum(-0.5 * noise * noise - log_std - HALF_LOG_2PI, axis=-1) - squash_correction(action)
    mask = (raw >= head.log_std_min) & (raw <= head.log_std_max)
    return SquashedSample(action, log_prob, u, noise, std, mask)


def squashed_backward(sample: SquashedSample, grad_action=None, grad_log_prob=None, grad_pre_squash=None):
    """Gradient w.r.t. the head's net output (``[mean, log_std]`` slots).

    ``grad_action`` has the action's shape, ``grad_log_prob`` one entry per
    batch row, ``grad_pre_squash`` the shape of ``u``.
    """
    a = sample.action
    one_minus = 1.0 - a * a
    g_u = np.zeros_like(a)
    if grad_action is not None:
        g_u += np.asarray(grad_action) * one_minus
    g_ls = np.zeros_like(a)
    if grad_log_prob is not None:
        glp = np.asarray(grad_log_prob, dtype=float)[..., None]
        g_u += glp * 2.0 * a * one_minus / (one_minus + SQUASH_EPS)
        g_ls -= glp
    if grad_pre_squash is not None:
        g_u += np.asarray(grad_pre_squash)
    g_mean = g_u
    g_ls = (g_ls + g_u * sample.std * sample.noise) * sample.clamp_mask
    return np.concatenate([g_mean, g_ls], axis=-1)


def squashed_log_prob(head: GaussianHead, net_output, action) -> np.ndarray:
    """Log-density of a given squashed action under the head's distribution."""
    mean, log_std, _ = head.split(net_output)
    a = np.clip(np.asarray(action, dtype=float), -ACTION_LIMIT, ACTION_LIMIT)
    u = np.arctanh(a)
    return gaussian_log_density(u, mean, log_std) - squash_correction(a)
