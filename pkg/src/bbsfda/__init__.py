"""Two-stage knowledge distillation for black-box source-free domain adaptation of segmentation models."""

__version__ = "0.1.0"
