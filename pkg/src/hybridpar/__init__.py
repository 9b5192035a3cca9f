"""Communication and memory models for hybrid tensor, expert and data parallelism."""

__version__ = "0.1.0"
