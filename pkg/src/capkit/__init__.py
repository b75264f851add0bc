"""Image captioning toolkit: attention captioners, beam decoding, ensembles,
and a full caption-metric suite on a small reverse-mode autodiff core."""

from .errors import CapkitError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["CapkitError", "NumericalError", "ValidationError", "__version__"]
