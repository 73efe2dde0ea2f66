"""Coding-metasurface far fields, beam measures and surrogate predictions."""

from ._native import (
    __version__,
    far_field_power,
    measures,
    predict,
    steering_config,
)

__all__ = ["__version__", "far_field_power", "measures", "predict", "steering_config"]
