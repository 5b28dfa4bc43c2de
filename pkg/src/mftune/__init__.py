"""Multi-fidelity Bayesian optimization toolkit for controller auto-tuning."""

__version__ = "0.1.0"
