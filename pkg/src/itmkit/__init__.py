"""itmkit: single-image inverse tone mapping with a hierarchical synthesis
network (HiSN) and a lightness adaptive modulation network (LAMN), built on a
small numpy autodiff engine."""

from .errors import ConfigError, FormatError, GradientError, ItmError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "GradientError", "ItmError", "ShapeError", "__version__"]
