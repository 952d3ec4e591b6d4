"""Agentic retrieval-augmented recommendation engine and benchmark harness."""

__version__ = "1.0.0"
