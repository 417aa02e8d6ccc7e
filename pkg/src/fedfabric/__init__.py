"""Federated task relay, pass-by-reference object fabric and workflow steering."""

__version__ = "0.1.0"
