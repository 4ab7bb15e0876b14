"""Multi-agent regression with collaborative (cross-agent) uncertainty:
permutation-equivariant precision estimators, Laplace likelihood training,
synthetic data and evaluation."""

__version__ = "0.1.0"
