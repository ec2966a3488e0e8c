"""Sampled-data ISS toolkit: simulate nonlinear closed loops under zero-order
hold, varying sampling periods and bounded measurement errors, and check
consistency, MSEC, Lyapunov and SP-ISS-VSR conditions numerically."""

__version__ = "0.1.0"
