"""Contextual Bayesian optimisation with relevance-driven context selection and costly interventions."""

__version__ = "0.1.0"
