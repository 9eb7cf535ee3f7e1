"""feasiflow: density-based feasibility learning with affine coupling flows."""

__version__ = "1.0.0"
