"""Building height retrieval from single SAR images by footprint-guided box regression."""

from sarbbr.geometry import SensorModel, height_from_layover, layover_px, project

__version__ = "0.1.0"

__all__ = ["SensorModel", "project", "layover_px", "height_from_layover", "__version__"]
