"""Binary neural networks with instance-aware activation thresholds."""

__version__ = "0.1.0"
