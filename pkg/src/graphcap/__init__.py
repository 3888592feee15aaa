"""Scene-graph-to-caption generation with a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
