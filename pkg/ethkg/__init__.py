"""
Temporal knowledge graph extrapolation with hybrid Euclidean and hyperbolic
scoring, built on a small numpy autodiff engine
"""

__version__ = "0.1.0"
