"""Laboratory for comparing generative and regression control policies on
small imitation-learning tasks, with linear and Gaussian-flow theory checks."""

__version__ = "0.1.0"

__all__ = [
    "ndmath",
    "nets",
    "objectives",
    "samplers",
    "envs",
    "metrics",
    "linear_lab",
    "theory_lab",
    "experiments",
    "cli",
]
