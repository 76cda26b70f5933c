"""Figures for training logs and discount sweeps, rendered to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_learning_curve(rows, path, title: str | None = None) -> None:
    """Learned reward rate and evaluated per-step reward against training steps."""
    steps = [r["step"] for r in rows]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    top.plot(steps, [r["theta"] for r in rows], label="learned rate")
    top.plot(steps, [r["eval_rate"] for r in rows], label="evaluated rate")
    top.set_ylabel("reward per step")
    top.legend(loc="lower right")
    bottom.plot(steps, [r["critic_loss"] for r in rows], label="critic loss")
    bottom.plot(steps, [r["theta_loss"] for r in rows], label="rate loss")
    bottom.set_yscale("log")
    bottom.set_xlabel("environment step")
    bottom.legend(loc="upper right")
    if title:
        top.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gamma_sweep(result: dict, path, title: str | None = None) -> None:
    """Distance of the centered discounted soft Q to the average-reward solution, per discount."""
    rows = result["rows"]
    horizon = [1.0 / (1.0 - r["discount"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(horizon, [max(r["centered_q_distance"], 1e-16) for r in rows], "o-", label="centered Q")
    ax.loglog(horizon, [max(r["rate_distance"], 1e-16) for r in rows], "s--", label="rate")
    ax.set_xlabel("effective horizon 1/(1-discount)")
    ax.set_ylabel("sup-norm distance")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
