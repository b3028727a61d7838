"""Differentially private distributed Bayesian learning over approximate HE."""
__version__ = "0.1.0"
