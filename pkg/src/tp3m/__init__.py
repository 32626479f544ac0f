"""Edge-aware 2D and pseudo-3D feature matching on a small numpy autodiff engine."""

__version__ = "0.1.0"
