"""Proposal-free referring-expression grounding by iterative patch shrinking."""

__version__ = "0.1.0"
