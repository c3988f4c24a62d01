"""Marker-free co-registration of mobile forest LiDAR scans to an aerial map."""

from .geometry import PointCloud, Pose, Source
from .config import Config, load_config

__version__ = "0.1.0"

__all__ = ["Config", "PointCloud", "Pose", "Source", "load_config", "__version__"]
