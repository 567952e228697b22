"""Dynamic causal graph discovery for multivariate time series."""

__version__ = "0.1.0"
