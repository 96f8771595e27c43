"""GPS-conditioned pixel diffusion on a procedural world, with score-distilled radiance fields."""

__version__ = "0.1.0"
