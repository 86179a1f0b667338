"""Grid-based pill detection: training, int8 inference, evaluation."""

__version__ = "0.1.0"
