"""Engine surface for external training loops.

Five calls wrap the two-tier replay memory: open, push, draw, report,
close. Feature vectors cross the boundary as contiguous float32 buffers
with an explicit length; everything returned is a copy, so callers can
mutate results freely. All calls are serialized by the handle, while the
swap worker stays asynchronous underneath (unless configured sync).
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from tieredreplay import (
    EpisodicMemory,
    GatePolicy,
    InsufficientSamples,
    Sample,
    ScoreInputs,
    StorageArchive,
    StreamBuffer,
    SwapRequest,
    SwapWorker,
    gate_select,
)
from tieredreplay.rng import substream

LOCK_NAME = ".engine.lock"


class PathBusy(Exception):
    """Another handle already owns this storage root."""


class InvalidConfig(Exception):
    pass


class EngineClosed(Exception):
    pass


@dataclass
class EngineConfig:
    storage_root: str
    dim: int
    em_capacity: int = 256
    em_policy: str = "reservoir"
    em_partitions: int = 4
    storage_capacity: Optional[int] = None
    read_latency_ms: float = 0.0
    io_concurrency: int = 8
    gate_kind: str = "entropy"
    swap_ratio: float = 0.5
    swap_mode: str = "async"
    seed: int = 0

    def validate(self) -> None:
        if not self.storage_root:
            raise InvalidConfig("storage_root is required")
        if self.dim <= 0:
            raise InvalidConfig("dim must be positive")
        if self.em_capacity <= 0:
            raise InvalidConfig("em_capacity must be positive")
        if not 0.0 <= self.swap_ratio <= 1.0:
            raise InvalidConfig("swap_ratio must be in [0, 1]")
        if self.swap_mode not in ("sync", "async"):
            raise InvalidConfig("swap_mode must be 'sync' or 'async'")


@dataclass
class DrawnSample:
    """A drawn memory sample, copied out of the engine."""

    slot: int
    id: int
    label: int
    task: int
    features: np.ndarray
    aux_logits: Optional[np.ndarray] = None


class EngineHandle:
    """Owns one episodic memory, one storage archive, and one swap worker."""

    def __init__(self, config: EngineConfig):
        if isinstance(config, dict):
            config = EngineConfig(**config)
        config.validate()
        self.config = config
        root = Path(config.storage_root)
        root.mkdir(parents=True, exist_ok=True)
        self._lock_path = root / LOCK_NAME
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PathBusy(f"{root} is already opened by another engine handle")
        os.close(fd)

        self._mutex = threading.RLock()
        self._closed = False
        self.em = EpisodicMemory(config.em_capacity, policy=config.em_policy,
                                 partitions=config.em_partitions)
        self.archive = StorageArchive(
            root,
            capacity=config.storage_capacity,
            read_latency_ms=config.read_latency_ms,
            io_concurrency=config.io_concurrency,
            rng_seed=int(substream(config.seed, 50).integers(0, 2**31)),
        )
        self.worker = SwapWorker(self.em, self.archive, mode=config.swap_mode,
                                 rng_seed=int(substream(config.seed, 51).integers(0, 2**31)))
        self._update_rng = substream(config.seed, 52)
        self._draw_rng = substream(config.seed, 53)
        self._gate_rng = substream(config.seed, 54)
        self._policy = GatePolicy(kind=config.gate_kind, swap_ratio=config.swap_ratio)
        self._pushed = 0
        self._swaps_submitted = 0

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        """Drain in-flight swaps, persist the archive, free the root lock."""
        with self._mutex:
            if self._closed:
                return
            self._closed = True
            try:
                self.worker.stop()
            finally:
                self.archive.close()
                self._lock_path.unlink(missing_ok=True)

    def __enter__(self) -> "EngineHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _check_open(self) -> None:
        if self._closed:
            raise EngineClosed("engine handle is closed")

    # -- data path --------------------------------------------------------------

    def push(self, samples: Sequence) -> int:
        """Ingest new samples: stream buffer -> memory update -> archive flush.

        Accepts DrawnSample-shaped objects, (id, label, task, features[, aux])
        tuples, or dicts with those keys. Returns how many samples went to
        the archive rather than memory.
        """
        with self._mutex:
            self._check_open()
            batch = [self._to_sample(s) for s in samples]
            if not batch:
                return 0
            buffer = StreamBuffer(capacity=len(batch))
            for s in batch:
                buffer.enqueue(s)
            evicted = self.em.update(buffer.drain(), self._update_rng)
            self.archive.put(evicted)
            self._pushed += len(batch)
            return len(evicted)

    def draw(self, k: int) -> list[DrawnSample]:
        """Copy k uniformly drawn memory samples out, with their slots."""
        with self._mutex:
            self._check_open()
            drawn = self.em.draw(k, self._draw_rng)
            return [
                DrawnSample(
                    slot=slot,
                    id=s.id,
                    label=s.label,
                    task=s.task,
                    features=np.array(s.features, dtype=np.float32),
                    aux_logits=None if s.aux_logits is None else np.array(s.aux_logits, dtype=np.float32),
                )
                for slot, s in drawn
            ]

    def report(self, slots: Sequence[int], correctness: Sequence[bool], probs) -> int:
        """Feed back training signals for drawn slots; returns swap-out count.

        `probs` is an (n, C) row-per-slot array of class probabilities. The
        gate scores each slot's current sample and the lowest-ranked
        swap_ratio fraction is handed to the swap worker.
        """
        with self._mutex:
            self._check_open()
            if len(self.em) == 0:
                raise InsufficientSamples("nothing in memory; push samples first")
            probs = np.asarray(probs, dtype=np.float64)
            if probs.ndim != 2 or probs.shape[0] != len(slots) or len(correctness) != len(slots):
                raise InvalidConfig("slots, correctness, and probs rows must align")

            inputs = []
            by_slot = {}
            for i, slot in enumerate(slots):
                sample = self.em.slots[slot]
                if sample is None:
                    continue
                by_slot[slot] = sample
                predicted = self._predicted_label(sample.label, bool(correctness[i]), probs[i])
                inputs.append(ScoreInputs(
                    sample_id=sample.id,
                    slot_index=slot,
                    predicted_label=predicted,
                    true_label=sample.label,
                    class_probs=probs[i],
                ))
            if not inputs:
                return 0
            decision = gate_select(inputs, self._policy, self._gate_rng)
            pending = self.worker.pending_slots()
            items = [(slot, by_slot[slot]) for slot, _sid in decision.swap_out if slot not in pending]
            if items:
                self.worker.submit(SwapRequest(batch_index=self._swaps_submitted, items=items))
            self._swaps_submitted += len(items)
            return len(items)

    @staticmethod
    def _predicted_label(true_label: int, correct: bool, row: np.ndarray) -> int:
        # the scorer only consumes correctness through predicted==true, so
        # synthesize a prediction consistent with the caller's flag
        if correct:
            return true_label
        top = int(np.argmax(row))
        return top if top != true_label else (true_label + 1) % max(2, len(row))

    def drain(self, timeout: Optional[float] = None) -> dict:
        with self._mutex:
            self._check_open()
            return self.worker.drain(timeout).as_dict()

    def stats(self) -> dict:
        """Swap statistics plus tier occupancy, as a plain mapping."""
        with self._mutex:
            self._check_open()
            out = self.worker.snapshot().as_dict()
            out.update({
                "pushed": self._pushed,
                "swaps_submitted": self._swaps_submitted,
                "memory_occupancy": len(self.em),
                "storage_live": self.archive.live_count,
                "storage_evicted": len(self.archive.evicted_ids()),
            })
            return out

    # -- conversion ----------------------------------------------------------------

    def _to_sample(self, rec) -> Sample:
        if isinstance(rec, Sample):
            src = rec
        elif isinstance(rec, dict):
            src = Sample(id=rec["id"], label=rec["label"], task=rec.get("task", 0),
                         features=rec["features"], aux_logits=rec.get("aux_logits"))
        elif isinstance(rec, (tuple, list)):
            sid, label, task, features, *rest = rec
            src = Sample(id=sid, label=label, task=task, features=features,
                         aux_logits=rest[0] if rest else None)
        else:
            src = Sample(id=rec.id, label=rec.label, task=getattr(rec, "task", 0),
                         features=rec.features, aux_logits=getattr(rec, "aux_logits", None))
        if len(src.features) != self.config.dim:
            raise InvalidConfig(f"sample {src.id}: feature length {len(src.features)} != dim {self.config.dim}")
        return src


def engine_open(config: EngineConfig | dict) -> EngineHandle:
    return EngineHandle(config)


def engine_close(handle: EngineHandle) -> None:
    handle.close()


def engine_push(handle: EngineHandle, samples: Sequence) -> int:
    return handle.push(samples)


def engine_draw(handle: EngineHandle, k: int) -> list[DrawnSample]:
    return handle.draw(k)


def engine_report(handle: EngineHandle, slots, correctness, probs) -> int:
    return handle.report(slots, correctness, probs)
