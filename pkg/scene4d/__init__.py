"""Временно согласованная многовидовая сегментация и реконструкция глубины."""

from scene4d.config import PipelineConfig, load_config
from scene4d.errors import (CalibrationError, ConfigError,
                            DegenerateInputError, FormatError, Scene4DError,
                            StageError)

__all__ = ["PipelineConfig", "load_config", "Scene4DError", "ConfigError",
           "CalibrationError", "FormatError", "DegenerateInputError",
           "StageError"]
