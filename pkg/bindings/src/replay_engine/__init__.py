"""Engine bindings: a five-call surface (open/push/draw/report/close) over
the tieredreplay two-tier replay memory, for use from external training
loops."""

from .engine import (
    DrawnSample,
    EngineClosed,
    EngineConfig,
    EngineHandle,
    InvalidConfig,
    PathBusy,
    engine_close,
    engine_draw,
    engine_open,
    engine_push,
    engine_report,
)

__all__ = [
    "DrawnSample",
    "EngineClosed",
    "EngineConfig",
    "EngineHandle",
    "InvalidConfig",
    "PathBusy",
    "engine_close",
    "engine_draw",
    "engine_open",
    "engine_push",
    "engine_report",
]

__version__ = "0.1.0"
