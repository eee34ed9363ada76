"""Geometry-gated transformer for captioning images from detected objects."""
from mtsm.config import VERSION as __version__

__all__ = ["__version__"]
