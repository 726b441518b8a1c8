"""Locality guidance for small-data vision transformers, on a numpy autodiff core."""

from . import autodiff, data, diagnostics, guidance, models, trainer

__version__ = "0.1.0"

__all__ = ["autodiff", "data", "diagnostics", "guidance", "models", "trainer", "__version__"]
