"""Forest stand segmentation from aerial imagery and canopy heights."""

__version__ = "0.1.0"
