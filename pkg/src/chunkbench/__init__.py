"""Benchmark harness comparing document chunking strategies for dense retrieval."""

__version__ = "0.1.0"
