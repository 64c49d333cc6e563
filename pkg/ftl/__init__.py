"""Multi-threaded flash translation layer over a simulated multi-bank NAND card."""

from ftl.config import EngineConfig, FlashGeometry, GcConfig, IoConfig, LatencyModel
from ftl.engine import EngineHandle, start

__all__ = [
    "EngineConfig",
    "EngineHandle",
    "FlashGeometry",
    "GcConfig",
    "IoConfig",
    "LatencyModel",
    "start",
]
