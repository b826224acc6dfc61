"""Motion consistency model distillation on synthetic moving-blob videos."""

__version__ = "0.1.0"
