"""Self-training driving agent with difference-image world models."""

__version__ = "0.1.0"
