"""Light-field semantic segmentation with sub-aperture fusion and angular rectification."""
from .errors import (ConfigError, DegenerateBatchError, DimensionError, FormatError, NonFiniteError,
                     OAFuserError, UsageError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DegenerateBatchError", "DimensionError", "FormatError", "NonFiniteError",
           "OAFuserError", "UsageError", "__version__"]
