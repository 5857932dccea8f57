"""Anti-bias soft label distillation: per-class teacher temperatures for robust fairness."""

__version__ = "0.1.0"
