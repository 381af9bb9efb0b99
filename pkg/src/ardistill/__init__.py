"""Desk-scale autoregressive diffusion distillation with analytic oracles."""

__version__ = "0.1.0"
