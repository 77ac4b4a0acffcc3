"""Minibatch optimal transport toolkit."""

__version__ = "1.0.0"
