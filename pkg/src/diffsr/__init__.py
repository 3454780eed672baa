"""diffsr: diffusion-based probabilistic downscaling of gridded fields."""

__version__ = "0.1.0"

from .backend import NUMBA_ENABLED, backend_name

__all__ = ["NUMBA_ENABLED", "backend_name", "__version__"]
