"""Nonlinear regression as smooth low-rank tensor completion."""
