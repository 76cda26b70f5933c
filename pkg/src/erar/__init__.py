"""Entropy-regularized average-reward RL: exact tabular solvers and ASAC."""

__version__ = "0.1.0"
