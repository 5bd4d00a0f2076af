"""Filter pruning toolkit: Approximated Oracle Filter Pruning and reference metrics."""

__version__ = "0.1.0"
