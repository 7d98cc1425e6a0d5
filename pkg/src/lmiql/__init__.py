"""Convex off-policy Q-learning toolkit.

Two SDP-based trainers (a nuclear-norm relaxation and an iterated
fixed-anchor scheme) over a quadratic-in-basis Q-function, with LSPI and
exact-LQR baselines, a noisy pendulum environment, and a Monte-Carlo
learning-curve harness.
"""

__version__ = "0.1.0"
