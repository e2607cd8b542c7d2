"""Environment-aware unsupervised anomaly detection under distribution shift."""

__version__ = "0.1.0"
