"""Multi-sub-graph differentiable architecture search on a numpy autodiff core."""

__version__ = "0.1.0"
