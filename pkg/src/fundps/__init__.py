"""Function-space diffusion posterior sampling for PDE-constrained fields."""

from .field import Field, Grid2D, Mask, apply_mask, read_field, resample, write_field

__version__ = "0.1.0"

__all__ = ["Field", "Grid2D", "Mask", "apply_mask", "read_field", "resample", "write_field"]
