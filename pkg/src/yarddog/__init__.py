"""Truncated feed-forward networks for small galleries: cut a net, attach a
centralize / normalize / supervised-PCA head, and evaluate open-set
family-vs-stranger identification."""

__version__ = "0.1.0"
