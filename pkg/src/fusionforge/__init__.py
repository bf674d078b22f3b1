"""Class-adaptive late fusion of multi-stream classifier scores."""

__version__ = "0.1.0"
