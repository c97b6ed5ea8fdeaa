"""Organization-level incentive planning for congestion reduction."""

__version__ = "0.1.0"
