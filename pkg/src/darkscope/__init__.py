"""Darknet scanner profiling: events, features, embeddings, clusters and change detection."""

__version__ = "0.1.0"
