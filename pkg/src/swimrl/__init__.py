"""Swimmer-control laboratory: flows, closed-form theory, small networks,
policy-gradient agents with a physics-derived baseline, and experiment
drivers."""

__version__ = "0.1.0"
