"""Branch-level speculative tool scheduling with a deterministic simulator."""

__version__ = "0.1.0"
