"""Storage tier: a capacity-bounded, class-indexed, persistent sample archive.

Layout on disk is an append-only record log plus a sidecar index:

    <root>/archive.log   8-byte magic, 1 version byte, then records of
                         [len u32 | id u64 | label u32 | task u32 | D u32 |
                          features f32*D | aux flag u8 | aux logits f32*K]
                         (little-endian; `len` counts the bytes after it,
                         so K is implied)
    <root>/archive.idx   liveness and offsets; rewritten on sync()/close()

Evicting never touches the log — a victim's live flag is simply cleared, so
capacity is counted in live samples and a torn final record costs at most
that one record. If the index file is missing the log is rescanned and every
decodable record comes back live (eviction history lives only in the index).

Reads are asynchronous: `request` returns a ticket that a background pool
completes after at least `read_latency_ms` (a first-class knob so pipelining
experiments behave the same on any hardware). The pool width bounds how many
reads are in flight at once.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .memory import Sample
from .rng import as_generator

MAGIC = b"TRARCHV1"
VERSION = 1
_HEADER = struct.Struct("<QIII")  # id, label, task, D


class ClassEmpty(Exception):
    """No live sample of the requested class."""


class CorruptLog(Exception):
    """Log undecodable past `offset`; reopen with repair=True to truncate."""

    def __init__(self, offset: int, reason: str = ""):
        self.offset = offset
        super().__init__(f"undecodable record at byte {offset}" + (f": {reason}" if reason else ""))


class TicketStatus(Enum):
    PENDING = "pending"
    READY = "ready"
    FAILED = "failed"


class ReadTicket:
    """Handle for one asynchronous read; resolves exactly once."""

    _next_id = 0
    _id_lock = threading.Lock()

    def __init__(self, sample_id: int):
        with ReadTicket._id_lock:
            ReadTicket._next_id += 1
            self.request_id = ReadTicket._next_id
        self.sample_id = sample_id
        self.status = TicketStatus.PENDING
        self.sample: Optional[Sample] = None
        self.reason: Optional[str] = None
        self._done = threading.Event()

    def _resolve(self, sample: Optional[Sample], reason: Optional[str]) -> None:
        if self._done.is_set():
            raise RuntimeError("ticket already resolved")
        if sample is not None:
            self.sample = sample
            self.status = TicketStatus.READY
        else:
            self.reason = reason
            self.status = TicketStatus.FAILED
        self._done.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    def result(self, timeout: Optional[float] = None) -> Sample:
        if not self.wait(timeout):
            raise TimeoutError(f"read of sample {self.sample_id} still pending")
        if self.status is TicketStatus.FAILED:
            raise KeyError(f"sample {self.sample_id}: {self.reason}")
        return self.sample


@dataclass
class _IndexEntry:
    offset: int
    length: int
    label: int
    live: bool


def _encode(sample: Sample) -> bytes:
    feats = np.ascontiguousarray(sample.features, dtype="<f4").tobytes()
    body = _HEADER.pack(sample.id, sample.label, sample.task, len(sample.features)) + feats
    if sample.aux_logits is None:
        body += b"\x00"
    else:
        body += b"\x01" + np.ascontiguousarray(sample.aux_logits, dtype="<f4").tobytes()
    return struct.pack("<I", len(body)) + body


def _decode_body(body: bytes) -> Sample:
    sid, label, task, dim = _HEADER.unpack_from(body, 0)
    pos = _HEADER.size
    feat_bytes = 4 * dim
    if len(body) < pos + feat_bytes + 1:
        raise ValueError("record shorter than its feature block")
    features = np.frombuffer(body, dtype="<f4", count=dim, offset=pos)
    pos += feat_bytes
    flag = body[pos]
    pos += 1
    aux = None
    if flag == 1:
        tail = len(body) - pos
        if tail % 4 != 0:
            raise ValueError("aux block not a float32 multiple")
        aux = np.frombuffer(body, dtype="<f4", count=tail // 4, offset=pos)
    elif flag != 0:
        raise ValueError(f"bad aux flag {flag}")
    elif len(body) != pos:
        raise ValueError("trailing bytes after aux flag")
    return Sample(id=sid, label=label, task=task, features=features, aux_logits=aux)


class StorageArchive:
    """Disk-backed sample archive with class-balanced eviction.

    `capacity` bounds the number of *live* samples (None = unbounded). When
    an insert overflows it, victims are drawn one at a time: uniformly among
    the classes tied for the largest live count, then uniformly within that
    class — so eviction can never make the class skew worse.
    """

    def __init__(
        self,
        root: str | Path,
        capacity: Optional[int] = None,
        read_latency_ms: float = 0.0,
        io_concurrency: int = 8,
        rng_seed: int = 0,
        repair: bool = False,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity
        self.read_latency_ms = float(read_latency_ms)
        self.rng_seed = rng_seed
        self._rng = as_generator(rng_seed)
        self.index: dict[int, _IndexEntry] = {}
        self.class_lists: dict[int, list[int]] = {}
        self._evicted_ids: set[int] = set()
        self._lock = threading.RLock()
        self._pool = ThreadPoolExecutor(max_workers=max(1, io_concurrency), thread_name_prefix="archive-io")
        self._closed = False

        self.log_path = self.root / "archive.log"
        self.idx_path = self.root / "archive.idx"
        if not self.log_path.exists():
            with open(self.log_path, "wb") as f:
                f.write(MAGIC + bytes([VERSION]))
        self._log = open(self.log_path, "r+b")
        self._end = self._log.seek(0, 2)
        if self._end != 9:  # existing records (or a damaged header): replay them
            try:
                self._load(repair=repair)
            except CorruptLog:
                self.close(write_index=False)
                raise

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def open(cls, root: str | Path, repair: bool = False, **kwargs) -> "StorageArchive":
        """Reopen an archive directory, replaying the log and sidecar index.

        Raises CorruptLog at the first undecodable byte; `repair=True`
        truncates the log there instead and keeps everything before it.
        Equivalent to the constructor; spelled `open` at call sites that
        expect prior contents.
        """
        return cls(root, repair=repair, **kwargs)

    def _load(self, repair: bool) -> None:
        with open(self.log_path, "rb") as f:
            head = f.read(9)
            if len(head) < 9 or head[:8] != MAGIC:
                raise CorruptLog(0, "bad magic")
            if head[8] != VERSION:
                raise CorruptLog(8, f"unsupported version {head[8]}")
            scanned: dict[int, _IndexEntry] = {}
            offset = 9
            while True:
                raw = f.read(4)
                if not raw:
                    break
                if len(raw) < 4:
                    if not repair:
                        raise CorruptLog(offset, "truncated length prefix")
                    break
                (length,) = struct.unpack("<I", raw)
                body = f.read(length)
                if len(body) < length:
                    if not repair:
                        raise CorruptLog(offset, "truncated record body")
                    break
                try:
                    sample = _decode_body(body)
                except Exception as exc:
                    if not repair:
                        raise CorruptLog(offset, str(exc))
                    break
                scanned[sample.id] = _IndexEntry(offset, length, sample.label, live=True)
                offset += 4 + length
        if repair:
            with open(self.log_path, "r+b") as f:
                f.truncate(offset)
            self._end = self._log.seek(0, 2)

        live_ids = None
        tombstones: set[int] = set()
        if self.idx_path.exists():
            sidecar = json.loads(self.idx_path.read_text())
            live_ids = {int(i) for i in sidecar.get("live", [])}
            tombstones = {int(i) for i in sidecar.get("evicted", [])}
        with self._lock:
            self.index = scanned
            self.class_lists = {}
            # ids that are neither live nor tombstoned were released to the
            # memory tier before close; they stay dead but are not losses
            self._evicted_ids = tombstones & set(scanned)
            for sid, entry in scanned.items():
                if live_ids is not None and sid not in live_ids:
                    entry.live = False
                else:
                    self.class_lists.setdefault(entry.label, []).append(sid)

    def sync(self) -> None:
        """Flush the log and rewrite the sidecar index."""
        with self._lock:
            self._log.flush()
            payload = {
                "live": sorted(sid for sid, e in self.index.items() if e.live),
                "evicted": sorted(self._evicted_ids),
            }
        self.idx_path.write_text(json.dumps(payload))

    def close(self, write_index: bool = True) -> None:
        if self._closed:
            return
        if write_index:
            self.sync()
        self._pool.shutdown(wait=True)
        self._log.close()
        self._closed = True

    # -- accounting ----------------------------------------------------------

    @property
    def live_count(self) -> int:
        with self._lock:
            return sum(len(v) for v in self.class_lists.values())

    def live_ids(self) -> set[int]:
        with self._lock:
            return {sid for sid, e in self.index.items() if e.live}

    def evicted_ids(self) -> set[int]:
        with self._lock:
            return set(self._evicted_ids)

    def class_counts(self) -> dict[int, int]:
        with self._lock:
            return {c: len(v) for c, v in self.class_lists.items() if v}

    def is_live(self, sample_id: int) -> bool:
        with self._lock:
            e = self.index.get(sample_id)
            return e is not None and e.live

    # -- writes ---------------------------------------------------------------

    def put(self, batch: list[Sample]) -> list[int]:
        """Append and index a batch; returns ids evicted to stay in capacity."""
        victims: list[int] = []
        with self._lock:
            for s in batch:
                entry = self.index.get(s.id)
                if entry is not None and entry.live:
                    raise ValueError(f"sample id {s.id} is already live")
                rec = _encode(s)
                self._log.write(rec)
                self.index[s.id] = _IndexEntry(self._end, len(rec) - 4, s.label, live=True)
                self._end += len(rec)
                self.class_lists.setdefault(s.label, []).append(s.id)
                self._evicted_ids.discard(s.id)
            self._log.flush()
            if self.capacity is not None:
                overflow = self.live_count - self.capacity
                for _ in range(max(0, overflow)):
                    victims.append(self._evict_one())
        return victims

    def _evict_one(self) -> int:
        counts = {c: len(v) for c, v in self.class_lists.items() if v}
        top = max(counts.values())
        tied = sorted(c for c, n in counts.items() if n == top)
        label = tied[int(self._rng.integers(0, len(tied)))]
        ids = self.class_lists[label]
        victim = ids[int(self._rng.integers(0, len(ids)))]
        self._drop(victim)
        return victim

    def _drop(self, sample_id: int) -> None:
        entry = self.index[sample_id]
        entry.live = False
        self.class_lists[entry.label].remove(sample_id)
        self._evicted_ids.add(sample_id)

    def release(self, sample_id: int) -> None:
        """Clear a sample's live flag because it migrated into the memory tier.

        Unlike capacity eviction this is a move, not a loss, so no tombstone
        is recorded; if a concurrent eviction already tombstoned the id, the
        tombstone is withdrawn (the sample demonstrably still exists)."""
        with self._lock:
            entry = self.index.get(sample_id)
            if entry is None:
                raise KeyError(f"sample {sample_id} was never archived")
            if entry.live:
                entry.live = False
                self.class_lists[entry.label].remove(sample_id)
            elif sample_id in self._evicted_ids:
                self._evicted_ids.discard(sample_id)
            else:
                raise KeyError(f"sample {sample_id} already released")

    # -- reads ------------------------------------------------------------------

    def read_now(self, sample_id: int) -> Sample:
        """Synchronous read of a live sample (no latency injection)."""
        with self._lock:
            entry = self.index.get(sample_id)
            if entry is None or not entry.live:
                raise KeyError(f"sample {sample_id} not live")
            return self._read_entry(entry)

    def _read_entry(self, entry: _IndexEntry) -> Sample:
        # pread leaves the write position alone; puts flush before any read
        # of the new record can be issued, so the bytes are always visible
        body = os.pread(self._log.fileno(), entry.length, entry.offset + 4)
        return _decode_body(body)

    def request(self, sample_id: int) -> ReadTicket:
        """Issue an asynchronous read; completes after >= read_latency_ms."""
        ticket = ReadTicket(sample_id)
        if self._closed:
            ticket._resolve(None, "ArchiveClosed")
            return ticket
        if self.read_latency_ms == 0:
            # zero injected latency: resolve inline, skipping a pool hop
            self._complete(ticket)
        else:
            self._pool.submit(self._complete, ticket)
        return ticket

    def _complete(self, ticket: ReadTicket) -> None:
        if self.read_latency_ms > 0:
            time.sleep(self.read_latency_ms / 1000.0)
        try:
            with self._lock:
                entry = self.index.get(ticket.sample_id)
                if entry is None or not entry.live:
                    ticket._resolve(None, "NotLive")
                    return
                sample = self._read_entry(entry)
            ticket._resolve(sample, None)
        except Exception as exc:  # surfaced through the ticket, never the pool
            ticket._resolve(None, f"ReadError: {exc}")

    def sample_random(self, label: int, rng=None, exclude=None) -> int:
        """Uniformly random live id of `label`; `exclude` may be one id or a set."""
        gen = self._rng if rng is None else as_generator(rng)
        if exclude is None:
            banned = frozenset()
        elif isinstance(exclude, (int, np.integer)):
            banned = frozenset((int(exclude),))
        else:
            banned = frozenset(exclude)
        with self._lock:
            ids = self.class_lists.get(label)
            if not ids:
                raise ClassEmpty(f"no live samples of class {label}")
            if banned:
                ids = [i for i in ids if i not in banned]
                if not ids:
                    raise ClassEmpty(f"class {label} has no live samples outside the excluded set")
            return ids[int(gen.integers(0, len(ids)))]
