"""Desk-scale evolutive rendering engine: learnable gauge transformations,
differentiable inverse-CDF ray sampling, and differentiable primitive
growth/split, with a relay schedule that hands optimization from heuristic
to learnable elements."""

__version__ = "0.1.0"
