"""Style-randomized training for domain generalization, with shape/texture bias analysis."""

__version__ = "0.1.0"
