"""Tail-averaged accelerated stochastic gradient descent for least squares."""

__version__ = "0.1.0"
