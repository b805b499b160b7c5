"""Trial-based cost-effectiveness analysis for cluster-randomised trials."""

__version__ = "0.1.0"
