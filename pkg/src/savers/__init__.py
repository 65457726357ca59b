"""Single-stage SAR target recognition with an encoder/decoder segmentation CNN."""

from .errors import (ConfigError, CorruptionError, DataError, DimensionError, EmptyMaskError,
                     FormatError, PlacementError, SaversError)
from .net import SaversConfig, SaversModel, build_model, coarse_segment, fine_segment, segment
from .trainer import TrainConfig, fit

__version__ = "0.1.0"
