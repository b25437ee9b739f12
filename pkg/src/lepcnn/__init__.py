"""Privacy-preserving offloading of CNN conv/fc layers with one-time additive masks."""

__version__ = "0.1.0"
