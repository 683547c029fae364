"""Linear-network speaker adaptation for multi-task BLSTM acoustic models."""

__version__ = "0.1.0"
