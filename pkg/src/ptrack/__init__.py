"""Desk-scale tracking laboratory: belief-state tracker, learned decision
policies, synthetic video world, and a human-feedback annotation service."""

__version__ = "0.1.0"
