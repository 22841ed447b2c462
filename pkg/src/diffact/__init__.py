"""Diffusion-transformer action policies trained from scratch on a toy manipulation simulator."""

__version__ = "0.1.0"

from .errors import ConfigurationError, DataError, DiffActError, ShapeError, TrainingError  # noqa: E402

__all__ = ["ConfigurationError", "DataError", "DiffActError", "ShapeError", "TrainingError", "__version__"]
