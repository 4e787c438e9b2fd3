"""Cost-aware hyper-parameter tuning on revocable cloud instances, simulated."""

__version__ = "0.1.0"
