"""Continuous-time possession-network model for team-sport passing data."""

__version__ = "0.1.0"
