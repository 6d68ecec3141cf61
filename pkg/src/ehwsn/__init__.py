"""Coreset codecs, quantized inference and an energy-harvesting sensor network simulator."""

from .dataio import ConfigError, DataError, LabeledStream, SensorWindow

__all__ = ["ConfigError", "DataError", "LabeledStream", "SensorWindow"]
__version__ = "0.1.0"
