"""Complex-event toolkit: trace generation, online labeling, probabilistic detection and evaluation."""

__version__ = "0.1.0"
