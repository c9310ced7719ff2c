"""Gradient-regularized robust classifiers on a from-scratch autodiff core."""

__version__ = "0.1.0"

from . import autodiff, attacks, data, diagnostics, edges, nn, objectives, serialize, training

__all__ = [
    "autodiff",
    "attacks",
    "data",
    "diagnostics",
    "edges",
    "nn",
    "objectives",
    "serialize",
    "training",
    "__version__",
]
