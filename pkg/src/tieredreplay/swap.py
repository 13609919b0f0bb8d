"""Swap worker: archives gate-selected memory samples and back-fills their
slots with same-class samples retrieved from storage.

Two modes. Sync applies a request inline before `submit` returns, so
training stalls on storage latency. Async hands the request to a single
background thread and returns immediately; replacements land while later
mini-batches train, which may briefly leave a drawn slot holding its
pre-swap sample (counted as a stale read, never torn).

For each swapped item the outgoing sample is archived *before* its slot is
overwritten, then a replacement of the same class is drawn uniformly from
storage (excluding the sample just archived) and moved into the slot: the
storage copy is released so every sample lives in exactly one tier.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Queue
from typing import Optional

from .memory import EpisodicMemory, Sample
from .rng import as_generator
from .storage import ClassEmpty, StorageArchive, TicketStatus


class WorkerStopped(Exception):
    pass


class TimedOut(Exception):
    def __init__(self, pending: int):
        self.pending = pending
        super().__init__(f"drain timed out with {pending} request(s) pending")


SYNC = "sync"
ASYNC = "async"


@dataclass
class SwapRequest:
    batch_index: int
    items: list[tuple[int, Sample]]  # (slot_index, outgoing sample)
    enqueue_time: float = field(default_factory=time.monotonic)

    def __post_init__(self):
        slots = [slot for slot, _ in self.items]
        if len(slots) != len(set(slots)):
            raise ValueError("slot indices must be distinct within a request")


@dataclass
class SwapStats:
    requests_enqueued: int = 0
    items_submitted: int = 0
    replacements_applied: int = 0
    replacements_skipped: int = 0
    stale_items_dropped: int = 0
    stale_reads_observed: int = 0
    failed_reads: int = 0
    queue_depth_max: int = 0
    total_retrieval_time: float = 0.0

    def as_dict(self) -> dict:
        return {
            "requests_enqueued": self.requests_enqueued,
            "items_submitted": self.items_submitted,
            "replacements_applied": self.replacements_applied,
            "replacements_skipped": self.replacements_skipped,
            "stale_items_dropped": self.stale_items_dropped,
            "stale_reads_observed": self.stale_reads_observed,
            "failed_reads": self.failed_reads,
            "queue_depth_max": self.queue_depth_max,
            "total_retrieval_time_s": self.total_retrieval_time,
        }


class SwapWorker:
    """One writer thread owning all storage->memory replacements."""

    def __init__(
        self,
        em: EpisodicMemory,
        archive: StorageArchive,
        mode: str = ASYNC,
        rng_seed: int = 0,
    ):
        if mode not in (SYNC, ASYNC):
            raise ValueError(f"mode must be '{SYNC}' or '{ASYNC}'")
        self.em = em
        self.archive = archive
        self.mode = mode
        self._rng = as_generator(rng_seed)
        self.stats = SwapStats()
        self._queue: Queue[SwapRequest] = Queue()
        self._pending = 0
        self._pending_slots: set[int] = set()
        self._cv = threading.Condition()
        self._stopped = False
        self._thread: Optional[threading.Thread] = None
        if mode == ASYNC:
            self._thread = threading.Thread(target=self._run, name="swap-worker", daemon=True)
            self._thread.start()

    # -- submission --------------------------------------------------------

    def submit(self, request: SwapRequest) -> None:
        with self._cv:
            if self._stopped:
                raise WorkerStopped("swap worker is stopped")
            self.stats.requests_enqueued += 1
            if not request.items:
                return
            self.stats.items_submitted += len(request.items)
            self._pending += 1
            self._pending_slots.update(slot for slot, _ in request.items)
        if self.mode == SYNC:
            try:
                self.process(request)
            finally:
                self._request_done(request)
        else:
            self._queue.put(request)
            depth = self._queue.qsize()
            with self._cv:
                self.stats.queue_depth_max = max(self.stats.queue_depth_max, depth)

    def record_draw(self, slot_indices) -> int:
        """Count how many just-drawn slots still await a pending replacement."""
        with self._cv:
            stale = sum(1 for s in slot_indices if s in self._pending_slots)
            self.stats.stale_reads_observed += stale
            return stale

    def pending_slots(self) -> set[int]:
        with self._cv:
            return set(self._pending_slots)

    def drain(self, timeout: Optional[float] = None) -> SwapStats:
        """Block until every submitted request has been applied."""
        with self._cv:
            ok = self._cv.wait_for(lambda: self._pending == 0, timeout)
            if not ok:
                raise TimedOut(self._pending)
            return self.snapshot()

    def snapshot(self) -> SwapStats:
        return SwapStats(**vars(self.stats))

    def stop(self, timeout: float = 30.0) -> SwapStats:
        try:
            stats = self.drain(timeout)
        finally:
            with self._cv:
                self._stopped = True
            if self._thread is not None:
                self._queue.put(None)  # wake the loop
                self._thread.join(timeout)
        return stats

    # -- worker side ---------------------------------------------------------

    def _run(self) -> None:
        while True:
            try:
                request = self._queue.get(timeout=0.25)
            except Empty:
                with self._cv:
                    if self._stopped:
                        return
                continue
            if request is None:
                return
            try:
                self.process(request)
            except Exception:
                with self._cv:  # soft-fail the whole request, keep the worker alive
                    self.stats.failed_reads += len(request.items)
            finally:
                self._request_done(request)

    def _request_done(self, request: SwapRequest) -> None:
        with self._cv:
            self._pending -= 1
            self._pending_slots.difference_update(slot for slot, _ in request.items)
            self._cv.notify_all()

    def process(self, request: SwapRequest) -> list[tuple[int, int]]:
        """Apply one request; returns (slot_index, incoming sample id) pairs.

        Each item is validated against the slot's *current* occupant: if an
        earlier request already refreshed the slot, the item is dropped
        (its recorded sample is no longer the one that would be displaced).
        Validated items archive the outgoing sample first, then fetch the
        replacement; a failed fetch undoes the archive so the sample keeps
        living in exactly one tier.
        """
        t0 = time.monotonic()
        plan = []  # (slot, outgoing, replacement id, ticket)
        # never hand a slot one of this request's own outgoing samples: if the
        # donor item later fails, its sample would exist in two slots at once
        banned = {out.id for _, out in request.items}
        skipped = dropped = 0
        for slot, out in request.items:
            current = self.em.slots[slot]
            if current is None or current.id != out.id:
                dropped += 1
                continue
            self.archive.put([out])
            try:
                rid = self.archive.sample_random(out.label, rng=self._rng, exclude=banned)
            except ClassEmpty:
                self.archive.release(out.id)  # no partner: the slot keeps it
                skipped += 1
                continue
            banned.add(rid)  # each replacement may serve only one slot
            plan.append((slot, out, rid, self.archive.request(rid)))

        applied: list[tuple[int, int]] = []
        failed = 0
        for slot, out, rid, ticket in plan:
            ticket.wait()
            if ticket.status is not TicketStatus.READY:
                failed += 1
                self.archive.release(out.id)
                continue
            self.em.replace(slot, ticket.sample)
            self.archive.release(rid)  # the sample now lives in memory
            applied.append((slot, rid))
        with self._cv:
            self.stats.replacements_applied += len(applied)
            self.stats.replacements_skipped += skipped
            self.stats.stale_items_dropped += dropped
            self.stats.failed_reads += failed
            self.stats.total_retrieval_time += time.monotonic() - t0
        return applied
