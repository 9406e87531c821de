"""Solvers and experiment services for meanfield_repr."""
