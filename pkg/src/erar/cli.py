"""Command-line entry point: ``erar solve|verify|train|eval|gamma-sweep``.

Exit codes: 0 ok, 1 bad input, 2 no convergence, 3 verification failure,
4 numeric failure.  ``ERAR_SEED`` supplies the default seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .asac import (
    TabularActor,
    TrainerConfig,
    evaluate,
    load_checkpoint,
    log_to_csv,
    make_prior,
    save_checkpoint,
    train,
)
from .envs import TabularEmbeddedEnv, make_env, tabular_mdp_for
from .errors import (
    ArgumentError,
    ConvergenceError,
    DivergenceError,
    NumericError,
    StructuralError,
    VerificationError,
)
from .exact import gamma_sweep, soft_policy_iteration, verify_theorems
from .mdp import TabularMdp, reward_rate

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3, 4


def default_seed() -> int:
    raw = os.environ.get("ERAR_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ArgumentError(f"ERAR_SEED must be an integer, got {raw!r}") from None


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_json(path, data) -> None:
    write_atomic(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_manifest(path, command: str, config: dict, seed: int, artifacts: dict, started: float) -> None:
    """Record what ran, with which resolved settings, and what it produced."""
    write_json(path, {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "wall_seconds": round(time.perf_counter() - started, 3),
        "version": __version__,
    })


def parse_sizes(text: str):
    sizes = []
    for item in text.split(","):
        try:
            s, a = (int(x) for x in item.lower().split("x"))
        except ValueError:
            raise ArgumentError(f"size {item!r} is not of the form <S>x<A>") from None
        if s < 1 or a < 1:
            raise ArgumentError(f"size {item!r} must be positive")
        sizes.append((s, a))
    return sizes


def parse_floats(text: str):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ArgumentError(f"expected comma-separated numbers, got {text!r}") from None


def load_mdp(args) -> TabularMdp:
    if bool(args.env) == bool(args.mdp):
        raise ArgumentError("give exactly one of --env or --mdp")
    if args.mdp:
        try:
            return TabularMdp.load(args.mdp)
        except FileNotFoundError:
            raise ArgumentError(f"no such MDP file: {args.mdp}") from None
    return tabular_mdp_for(args.env)


# -- commands --------------------------------------------------------------


def cmd_solve(args) -> int:
    started = time.perf_counter()
    mdp = load_mdp(args)
    pi, dv, report = soft_policy_iteration(mdp, args.beta, tolerance=args.tolerance, method=args.method)
    print(f"theta* {dv.theta:.9f}")
    print(f"rounds {report.iterations}")
    out = Path(args.out)
    write_json(out, {
        "theta_star": dv.theta,
        "inv_temperature": args.beta,
        "policy": pi.probs.tolist(),
        "q": dv.q.tolist(),
        "anchor": list(dv.anchor),
        "rounds": report.iterations,
        "theta_history": list(report.theta_history),
    })
    if args.manifest:
        source = {"env": args.env} if args.env else {"mdp": args.mdp}
        write_manifest(args.manifest, "solve", {**source, "beta": args.beta, "tolerance": args.tolerance,
                                                "method": args.method}, 0, {"solution": out}, started)
    return EXIT_OK


def cmd_verify(args) -> int:
    started = time.perf_counter()
    seed = default_seed() if args.seed is None else args.seed
    report = verify_theorems(args.mdps, seed=seed, sizes=parse_sizes(args.sizes),
                             inv_temperature=parse_floats(args.beta), mixing=args.mixing,
                             perturb_pi_prime=args.perturb_pi_prime)
    write_json(args.report, report)
    for name, check in report["checks"].items():
        note = " (expected failure)" if check.get("expected_failure") else ""
        print(f"{name}: {check['violations']} violation(s) in {check['checked']} check(s), "
              f"worst {check['worst']:.3e}{note}")
    failed = report["unexpected_violations"] > 0 or report["total_violations"] > 0
    if failed:
        seeds = sorted({s for c in report["checks"].values() for s in c["failing_seeds"]})
        print(f"FAILED: failing MDP seed(s) {seeds}", file=sys.stderr)
    if args.manifest:
        write_manifest(args.manifest, "verify", {"mdps": args.mdps, "sizes": args.sizes, "beta": args.beta,
                                                 "mixing": args.mixing, "perturb_pi_prime": args.perturb_pi_prime},
                       seed, {"report": args.report}, started)
    return EXIT_VERIFY if failed else EXIT_OK


TRAIN_FLAGS = {
    "env": "env", "steps": "total_steps", "beta": "inv_temperature", "seed": "seed",
    "prior": "prior", "eval_interval": "eval_interval", "eval_episodes": "eval_episodes",
    "eval_episode_len": "eval_episode_len", "learning_starts": "learning_starts",
    "batch_size": "batch_size", "reset_mean": "reset_mean",
}


def resolve_train_config(args) -> TrainerConfig:
    """Config file values, then CLI flags on top; seed falls back to ``ERAR_SEED``."""
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ArgumentError(f"no such config file: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"malformed config {args.config} at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ArgumentError("config file must hold a JSON object")
    if "seed" not in data:
        data["seed"] = default_seed()
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    if args.hidden is not None:
        data["hidden_sizes"] = [int(x) for x in args.hidden.split(",")]
    if args.no_wall_time:
        data["log_wall_time"] = False
    return TrainerConfig.from_dict(data)


def cmd_train(args) -> int:
    started = time.perf_counter()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path, ckpt_path = out_dir / "train_log.csv", out_dir / "checkpoint.npz"
    if args.resume:
        env_name = json.loads(_checkpoint_meta(args.resume))["config"]["env"]
        state, config = load_checkpoint(args.resume, make_env(env_name))
        if args.steps is not None:
            config.total_steps = args.steps
    else:
        state, config = None, resolve_train_config(args)
    env = make_env(config.env)
    try:
        state, rows = train(env, config, state=state, checkpoint_path=ckpt_path)
    except NumericError as exc:
        print(f"numeric failure: {exc}; last checkpoint kept at {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt_path, state, config)
    write_atomic(log_path, log_to_csv(rows))
    artifacts = {"log": log_path, "checkpoint": ckpt_path}
    if args.plot and rows:
        from .plotting import plot_learning_curve
        plot_path = out_dir / "learning_curve.png"
        plot_learning_curve(rows, plot_path, title=config.env)
        artifacts["plot"] = plot_path
    print(f"steps {state.step}  theta {state.theta_value:.6f}  log {log_path}")
    write_manifest(out_dir / "manifest.json", "train", config.to_dict(), config.seed, artifacts, started)
    return EXIT_OK


def _checkpoint_meta(path) -> str:
    try:
        with np.load(path) as data:
            return bytes(data["meta"]).decode()
    except (FileNotFoundError, KeyError, ValueError, OSError) as exc:
        raise ArgumentError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    started = time.perf_counter()
    seed = default_seed() if args.seed is None else args.seed
    if args.checkpoint:
        meta = json.loads(_checkpoint_meta(args.checkpoint))
        env_name = args.env or meta["config"]["env"]
        state, config = load_checkpoint(args.checkpoint, make_env(meta["config"]["env"]))
        actor, beta, prior = state.actor, config.inv_temperature, state.prior
    elif args.solution:
        if not args.env:
            raise ArgumentError("--solution needs --env")
        env_name = args.env
        sol = json.loads(Path(args.solution).read_text())
        actor, beta, prior = TabularActor(np.array(sol["policy"])), sol["inv_temperature"], make_prior("uniform")
    else:
        raise ArgumentError("give --checkpoint or --solution")
    env = make_env(env_name)
    result = evaluate(actor, env, args.episodes, args.episode_len, seed=seed,
                      deterministic=args.deterministic, inv_temperature=beta, prior=prior)
    print(f"mean_return {result['mean_return']:.6f} ± {result['stderr']:.6f} ({args.episodes} episodes)")
    print(f"reward_rate {result['mean_rate']:.6f} ± {result['rate_stderr']:.6f}")
    print(f"regularized_rate {result['mean_regularized_rate']:.6f} ± {result['regularized_rate_stderr']:.6f}")
    if isinstance(env, TabularEmbeddedEnv) and isinstance(actor, TabularActor):
        print(f"exact_regularized_rate {reward_rate(env.mdp, actor.probs, beta):.9f}")
    if args.out:
        write_json(args.out, result)
    if args.manifest:
        write_manifest(args.manifest, "eval", {"env": env_name, "episodes": args.episodes,
                                               "episode_len": args.episode_len,
                                               "deterministic": args.deterministic}, seed,
                       {"result": args.out or ""}, started)
    return EXIT_OK


def cmd_gamma_sweep(args) -> int:
    started = time.perf_counter()
    mdp = load_mdp(args)
    result = gamma_sweep(mdp, args.beta, parse_floats(args.discounts))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["discount", "centered_q_distance", "rate_distance"])
    for row in result["rows"]:
        writer.writerow([repr(row["discount"]), repr(row["centered_q_distance"]), repr(row["rate_distance"])])
    text = buf.getvalue()
    artifacts = {}
    if args.out:
        write_atomic(args.out, text)
        artifacts["csv"] = args.out
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_gamma_sweep
        plot_gamma_sweep(result, args.plot)
        artifacts["plot"] = args.plot
    if args.manifest:
        source = {"env": args.env} if args.env else {"mdp": args.mdp}
        write_manifest(args.manifest, "gamma-sweep", {**source, "beta": args.beta, "discounts": args.discounts},
                       0, artifacts, started)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are bad input, not the "no convergence" code argparse would use
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="erar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def mdp_source(p):
        p.add_argument("--env", help="tabular env name, e.g. random_tabular:7:5:3 or ring")
        p.add_argument("--mdp", help="MDP JSON file")
        p.add_argument("--beta", type=float, default=1.0, help="inverse temperature")
        p.add_argument("--manifest", help="write a run manifest here")

    p = sub.add_parser("solve", help="exact soft policy iteration")
    mdp_source(p)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--method", choices=["iterative", "direct"], default="iterative")
    p.add_argument("--out", default="solution.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="randomized checks of the exact theory")
    p.add_argument("--mdps", type=int, default=100)
    p.add_argument("--sizes", default="5x3,20x4")
    p.add_argument("--beta", default="1", help="one or more comma-separated values")
    p.add_argument("--seed", type=int)
    p.add_argument("--mixing", type=float, default=0.1)
    p.add_argument("--perturb-pi-prime", type=float, default=0.0)
    p.add_argument("--report", default="verify_report.json")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train ASAC")
    p.add_argument("--config", help="JSON file with trainer config fields")
    p.add_argument("--env")
    p.add_argument("--steps", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--prior", choices=["uniform", "gaussian"])
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--eval-episode-len", type=int)
    p.add_argument("--learning-starts", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--reset-mean", choices=["nonterminal", "all"])
    p.add_argument("--hidden", help="comma-separated hidden layer sizes")
    p.add_argument("--no-wall-time", action="store_true", help="log wall_ms as 0 for byte-stable logs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-dir", default="erar-run")
    p.add_argument("--plot", action="store_true", help="also render learning_curve.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or an exact tabular solution")
    p.add_argument("--checkpoint")
    p.add_argument("--solution", help="solution JSON written by solve")
    p.add_argument("--env")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--episode-len", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gamma-sweep", help="discounted soft Q against the average-reward solution")
    mdp_source(p)
    p.add_argument("--discounts", default="0.9,0.99,0.999,0.9999")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.add_argument("--plot", help="also render the sweep to this image file")
    p.set_defaults(func=cmd_gamma_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ArgumentError, StructuralError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        if getattr(exc, "report", None) is not None:
            print(f"report: {exc.report}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (NumericError, DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
