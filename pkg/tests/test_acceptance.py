"""End-to-end acceptance gate.

Each test records one PASS/FAIL line through the ``acceptance`` fixture; the
summary is printed at the end of the pytest run.
"""

import json
import math
import time

import numpy as np
import pytest

import erar.asac as asac
from conftest import ONE_STATE_THETA
from erar.asac import TrainerConfig, evaluate, init_state, make_batch, tabular_policy_of, train
from erar.cli import main
from erar.envs import discretize_pendulum, make_env
from erar.exact import gamma_sweep, soft_policy_iteration, verify_theorems
from erar.mdp import TabularMdp, make_random_mdp
from erar.nn import Mlp

SWEEP_SIZES = [(s, a) for s in (3, 5, 20) for a in (2, 3, 4)]
SWEEP_BETAS = [0.3, 1.0, 5.0]
DISCOUNTS = (0.9, 0.99, 0.999, 0.9999)
# soft-optimal rate of the 64^3 discretized pendulum at beta = 5, recomputed below
PENDULUM_THETA_64 = -0.49352611787407336
LONG_RUN_LEN = 10_000
FD_STEP = 1e-6
FD_PROBES = 24


@pytest.fixture(scope="module")
def sweep():
    started = time.perf_counter()
    report = verify_theorems(500, seed=0, sizes=SWEEP_SIZES, inv_temperature=SWEEP_BETAS)
    return report, time.perf_counter() - started


def test_rate_gap_identity(sweep, acceptance):
    report, seconds = sweep
    check = report["checks"]["rate_gap"]
    combos = {(i["states"], i["actions"], i["beta"]) for i in report["instances"]}
    ok = check["violations"] == 0 and check["checked"] == 1000 and len(combos) == 27 and seconds < 120
    acceptance(1, ok, f"{check['checked']} pairs, worst {check['worst']:.2e}, {seconds:.1f}s")
    assert ok


def test_policy_improvement(sweep, acceptance):
    report, _ = sweep
    mono, strict = report["checks"]["monotonicity"], report["checks"]["strict_improvement"]
    ok = mono["violations"] == 0 and strict["violations"] == 0 and strict["checked"] > 0
    acceptance(2, ok, f"{mono['checked']} improvements, {strict['checked']} strict, "
                      f"{mono['violations'] + strict['violations']} violations")
    assert ok


def test_fixed_point(sweep, acceptance):
    report, _ = sweep
    fp, res = report["checks"]["fixed_point"], report["checks"]["backup_residual"]
    ok = fp["violations"] == 0 and res["violations"] == 0 and fp["checked"] == 500
    acceptance(3, ok, f"worst Boltzmann gap {fp['worst']:.2e}, worst residual {res['worst']:.2e}")
    assert ok


def test_closed_form_one_state(acceptance):
    mdp = TabularMdp(1, 2, np.ones((1, 2, 1)), np.array([[0.0, 1.0]]))
    pi, dv, _ = soft_policy_iteration(mdp, 1.0)
    theta_err = abs(dv.theta - ONE_STATE_THETA)
    pi_err = abs(pi.probs[0, 1] - math.e / (1 + math.e))
    ok = theta_err < 1e-9 and pi_err < 1e-9
    acceptance(4, ok, f"theta error {theta_err:.1e}, policy error {pi_err:.1e}")
    assert ok


def test_discount_limit(acceptance):
    started = time.perf_counter()
    final, monotone = [], 0
    for k in range(50):
        S, A = SWEEP_SIZES[k % len(SWEEP_SIZES)]
        rows = gamma_sweep(make_random_mdp(k, S, A), 1.0, DISCOUNTS)["rows"]
        dist = [r["centered_q_distance"] for r in rows]
        final.append(dist[-1])
        monotone += all(b < a for a, b in zip(dist, dist[1:]))
    seconds = time.perf_counter() - started
    ok = max(final) < 1e-2 and monotone >= 45 and seconds < 300
    acceptance(5, ok, f"worst distance at 0.9999 {max(final):.2e}, monotone {monotone}/50, {seconds:.1f}s")
    assert ok


def _fd(fn, array, idx):
    orig = array[idx]
    array[idx] = orig + FD_STEP
    up = fn()
    array[idx] = orig - FD_STEP
    down = fn()
    array[idx] = orig
    return (up - down) / (2 * FD_STEP)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _probes(rng, params):
    sizes = np.array([p.size for p in params])
    for _ in range(FD_PROBES):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        yield i, np.unravel_index(int(rng.integers(params[i].size)), params[i].shape)


def _captured_grads(monkeypatch, fn):
    """Run ``fn`` with the optimizer step replaced by a recorder of the gradients it receives."""
    seen = []
    monkeypatch.setattr(asac, "adam_step", lambda opt, params, grads: seen.append([g.copy() for g in grads]))
    fn()
    monkeypatch.undo()
    return seen


def test_gradients_match_finite_differences(acceptance, monkeypatch):
    env = make_env("pointmass", seed=0)
    config = TrainerConfig(env="pointmass", hidden_sizes=[8, 8], grad_clip=1e9, inv_temperature=2.0,
                           prior="gaussian")
    state = init_state(env, config)
    rng = np.random.default_rng(0)
    n = 6
    obs = rng.uniform(-1, 1, (n, 2))
    batch = make_batch(obs, rng.uniform(-0.9, 0.9, (n, 2)), rng.normal(size=n), obs + 0.1,
                       [False] * (n - 1) + [True])
    y = rng.normal(size=n)
    worst = {}

    # critic: mean squared error of the centered output against fixed targets
    grads = _captured_grads(monkeypatch, lambda: asac.critic_update(state, batch, y, config))[0]
    critic = state.critics[0]

    def critic_loss():
        return float(np.mean((asac.centered_q(critic, batch["obs"], batch["actions"], state.anchor) - y) ** 2))

    worst["critic"] = max(_rel(grads[i][idx], _fd(critic_loss, critic.params[i], idx))
                          for i, idx in _probes(rng, critic.params))

    # actor: reparameterized loss with the noise held fixed
    state.critics = [Mlp(critic.layer_sizes, seed=5), Mlp(critic.layer_sizes, seed=6)]
    noise = rng.normal(size=(n, 2))
    _, actor_grads = asac.actor_loss_and_grads(state, obs, noise, config)
    params = state.actor.net.params
    worst["actor"] = max(_rel(actor_grads[i][idx],
                              _fd(lambda: asac.actor_loss_and_grads(state, obs, noise, config)[0], params[i], idx))
                         for i, idx in _probes(rng, params))

    # reward rate: squared distance to the batch target, at several theta values
    target = asac.theta_target(state, batch, config)
    errs = []
    for theta in rng.normal(size=FD_PROBES):
        state.theta[0] = theta
        g = _captured_grads(monkeypatch, lambda: asac.theta_update(state, batch, config))[0][0]
        errs.append(_rel(g[0], _fd(lambda: float((state.theta[0] - target) ** 2), state.theta, 0)))
    worst["theta"] = max(errs)

    ok = all(v < 1e-4 for v in worst.values())
    acceptance(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" ({FD_PROBES} probes each)")
    assert ok


@pytest.mark.slow
def test_tabular_end_to_end(acceptance):
    details, ok = [], True
    for k in range(5):
        name = f"random_tabular:{k}:3:2"
        env = make_env(name, seed=0)
        pi, dv, _ = soft_policy_iteration(env.mdp, 1.0)
        config = TrainerConfig(env=name, inv_temperature=1.0, total_steps=50_000, eval_interval=10_000,
                               eval_episodes=2, eval_episode_len=200, log_wall_time=False)
        started = time.perf_counter()
        state, _ = train(env, config)
        seconds = time.perf_counter() - started
        gap = abs(state.theta_value - dv.theta)
        tv = float(np.max(0.5 * np.abs(tabular_policy_of(state.actor, env) - pi.probs).sum(axis=1)))
        ok &= gap < 0.05 and tv < 0.1 and seconds < 600
        details.append(f"mdp {k}: gap {gap:.3f} tv {tv:.3f} {seconds:.0f}s")
    acceptance(7, ok, "; ".join(details))
    assert ok


@pytest.mark.slow
def test_pendulum_end_to_end(acceptance):
    oracle = soft_policy_iteration(discretize_pendulum(64, 64, 64), 5.0, tolerance=1e-6, method="direct")[1].theta
    assert oracle == pytest.approx(PENDULUM_THETA_64, abs=1e-6)
    started = time.perf_counter()
    state, rows = train(make_env("pendulum", seed=0), TrainerConfig(env="pendulum", total_steps=200_000))
    minutes = (time.perf_counter() - started) / 60
    # the rate is a long-run average, so episodes are long enough to wash out the swing-up transient
    result = evaluate(state.actor, make_env("pendulum"), episodes=10, episode_len=LONG_RUN_LEN, seed=0)
    short = evaluate(state.actor, make_env("pendulum"), episodes=10, episode_len=1000, seed=0)
    rate = result["mean_rate"]
    ok = rate >= 0.9 * oracle and minutes < 60
    acceptance(8, ok, f"long-run rate {rate:.4f} ± {result['rate_stderr']:.4f} vs threshold {0.9 * oracle:.4f} "
                      f"(1000-step episodes from reset: {short['mean_rate']:.4f}), "
                      f"learned theta {state.theta_value:.4f}, {minutes:.1f} min")
    assert ok


def test_reset_penalty_mechanics(acceptance, monkeypatch):
    calls = []
    real = asac.adaptive_reset_penalty

    def recording(penalty, batch, config):
        out = real(penalty, batch, config)
        calls.append((penalty, batch["rewards"].copy(), batch["terminated"].copy(), out))
        return out

    monkeypatch.setattr(asac, "adaptive_reset_penalty", recording)
    config = TrainerConfig(env="pointmass", total_steps=20_000, eval_interval=5000, eval_episodes=2,
                           eval_episode_len=200, log_wall_time=False)
    env = make_env("pointmass", seed=0)
    state, rows = train(env, config)
    worst, prev = 0.0, 0.0
    for penalty, rewards, terminated, out in calls:
        kept = rewards[~terminated]
        expected = (1 - config.tau) * prev + config.tau * config.reset_scale * (kept.mean() if len(kept) else 0.0)
        worst = max(worst, abs(out - expected), abs(penalty - prev))
        prev = out
    terminations = sum(int(t.any()) for _, _, t, _ in calls)
    finite = all(math.isfinite(v) for r in rows for v in r.values()) and math.isfinite(state.theta_value)
    ok = worst < 1e-12 and finite and len(rows) == 4 and terminations > 0
    acceptance(9, ok, f"{len(calls)} updates, {terminations} batches with resets, worst recurrence error "
                      f"{worst:.1e}, final penalty {state.penalty:.4f}")
    assert ok


@pytest.mark.slow
def test_determinism(acceptance, tmp_path, capsys):
    def outputs(k):
        d = tmp_path / str(k)
        main(["solve", "--env", "random_tabular:7:5:3", "--out", str(d / "solution.json")])
        main(["verify", "--mdps", "50", "--report", str(d / "report.json")])
        main(["train", "--env", "random_tabular:0:3:2", "--steps", "10000", "--no-wall-time",
              "--out-dir", str(d / "run")])
        # train echoes its output path, which is the only intended difference
        printed = capsys.readouterr().out.replace(str(d), "<dir>")
        files = [d / "solution.json", d / "report.json", d / "run" / "train_log.csv"]
        with np.load(d / "run" / "checkpoint.npz") as ck:
            arrays = {key: ck[key].tobytes() for key in ck.files}
        return printed, [f.read_bytes() for f in files], arrays

    first, second = outputs(0), outputs(1)
    ok = first == second
    meta = json.loads(first[2]["meta"].decode())
    acceptance(10, ok, f"solve/verify/train outputs identical across two runs (train to step {meta['step']})")
    assert ok
