"""Prioritised execution of extended set-based robot tasks with CBF-constrained QPs."""

__version__ = "0.1.0"
