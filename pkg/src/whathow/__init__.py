"""Online task-model inference gating a low-rank context RNN for continual
learning of compositional cognitive tasks."""

__version__ = "0.1.0"
