"""Progressive face aging with gated residual sub-generators."""

__version__ = "0.1.0"
