"""Autoregressive Gaussian splitting on mesh graphs with a differentiable splat renderer."""

__version__ = "0.1.0"
