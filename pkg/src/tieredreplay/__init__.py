"""Two-tier episodic memory for rehearsal-based continual learning.

A small in-memory replay buffer (episodic memory) is backed by a large
disk-resident sample archive. A scoring gate picks which drawn replay
samples to swap out each mini-batch, and a background worker exchanges them
with same-class samples from the archive without stalling training.
"""

from .gate import (
    DegenerateDistribution,
    EmptyBatch,
    GateDecision,
    GateKind,
    GatePolicy,
    ScoreInputs,
    gate_select,
    score_entropy,
    swap_count,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunResult,
    conservation_audit,
    run_experiment,
    run_repeats,
    run_speed_test,
    run_sweep,
)
from .learner import (
    Bundle,
    BundleReport,
    IncompleteMatrix,
    MetricsRecord,
    MissingSnapshot,
    MLPClassifier,
    TaskOutOfRange,
    TaskStream,
    Trainer,
    evaluate,
    train_bundle,
)
from .memory import (
    BufferFull,
    EmptySlot,
    EpisodicMemory,
    InsufficientSamples,
    InvalidSlot,
    Sample,
    StreamBuffer,
    UpdatePolicy,
)
from .storage import ClassEmpty, CorruptLog, ReadTicket, StorageArchive, TicketStatus
from .swap import ASYNC, SYNC, SwapRequest, SwapStats, SwapWorker, TimedOut, WorkerStopped

__version__ = "0.1.0"

__all__ = [
    "ASYNC",
    "SYNC",
    "Bundle",
    "BundleReport",
    "BufferFull",
    "ClassEmpty",
    "ConfigError",
    "CorruptLog",
    "DegenerateDistribution",
    "EmptyBatch",
    "EmptySlot",
    "EpisodicMemory",
    "ExperimentConfig",
    "GateDecision",
    "GateKind",
    "GatePolicy",
    "IncompleteMatrix",
    "InsufficientSamples",
    "InvalidSlot",
    "MetricsRecord",
    "MissingSnapshot",
    "MLPClassifier",
    "ReadTicket",
    "RunResult",
    "Sample",
    "ScoreInputs",
    "StorageArchive",
    "StreamBuffer",
    "SwapRequest",
    "SwapStats",
    "SwapWorker",
    "TaskOutOfRange",
    "TaskStream",
    "TicketStatus",
    "TimedOut",
    "Trainer",
    "UpdatePolicy",
    "WorkerStopped",
    "conservation_audit",
    "evaluate",
    "gate_select",
    "run_experiment",
    "run_repeats",
    "run_speed_test",
    "run_sweep",
    "score_entropy",
    "swap_count",
    "train_bundle",
]
