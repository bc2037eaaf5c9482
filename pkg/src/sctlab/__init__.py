"""Sequence models with opponent-action conjectures for multi-agent pursuit."""

__version__ = "0.1.0"
