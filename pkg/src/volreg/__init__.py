"""volreg: desk-scale deformable registration of longitudinal 3D volumes."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError, PlacementError, VolregError
from .volume import BoundingBox, LabelMap, Volume

__all__ = [
    "BoundingBox",
    "ConfigError",
    "DataError",
    "LabelMap",
    "NumericError",
    "PlacementError",
    "Volume",
    "VolregError",
    "__version__",
]
