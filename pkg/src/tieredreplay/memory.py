"""In-memory tier: stream buffer for incoming data and the episodic replay memory.

The episodic memory is a fixed array of M slots split into contiguous
partitions. Slot writes are serialized per partition; reads are lock-free
(a reader may see a slot's pre- or post-replacement sample, but always a
single complete sample). Samples displaced by an update are *returned* to
the caller rather than dropped, so the storage tier can preserve them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .rng import as_generator


class BufferFull(Exception):
    """Stream buffer is at capacity; drain it before enqueueing more."""


class InsufficientSamples(Exception):
    """A draw asked for more samples than the memory currently holds."""


class InvalidSlot(Exception):
    """Slot index outside [0, capacity)."""


class EmptySlot(Exception):
    """Slot exists but holds no sample."""


def _freeze(vec, dtype=np.float32) -> np.ndarray:
    arr = np.array(vec, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class Sample:
    """One training example.

    `features` and `aux_logits` are stored as read-only float32 arrays so a
    sample can be shared between tiers without defensive copying.
    """

    id: int
    label: int
    task: int
    features: np.ndarray
    aux_logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = _freeze(self.features)
        if self.aux_logits is not None:
            self.aux_logits = _freeze(self.aux_logits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        if (self.id, self.label, self.task) != (other.id, other.label, other.task):
            return False
        if not np.array_equal(self.features, other.features):
            return False
        if (self.aux_logits is None) != (other.aux_logits is None):
            return False
        return self.aux_logits is None or np.array_equal(self.aux_logits, other.aux_logits)

    def __hash__(self) -> int:
        return hash(self.id)


class StreamBuffer:
    """Arrival-ordered holding area for samples of the task being ingested."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: list[Sample] = []

    def __len__(self) -> int:
        return len(self.entries)

    def enqueue(self, sample: Sample) -> None:
        if len(self.entries) >= self.capacity:
            raise BufferFull(f"stream buffer at capacity {self.capacity}")
        self.entries.append(sample)

    def drain(self) -> list[Sample]:
        """Remove and return all entries, oldest first."""
        out = self.entries
        self.entries = []
        return out


class UpdatePolicy(str, Enum):
    RING_EQUAL_CLASS = "ring_equal_class"
    RESERVOIR = "reservoir"
    GREEDY_BALANCED = "greedy_balanced"


@dataclass
class _ClassState:
    # slot indices of this class in arrival order (oldest first)
    slots: list[int] = field(default_factory=list)


class EpisodicMemory:
    """Fixed-capacity, partitioned slot array of samples.

    Update policies:

    * ``RESERVOIR`` — classic streaming reservoir; after n offers each of
      them is resident with probability M/n.
    * ``GREEDY_BALANCED`` — keeps per-class slot counts within 1 of each
      other (among observed classes, whenever M allows), evicting surplus
      from the largest class.
    * ``RING_EQUAL_CLASS`` — every observed class owns an equal share of
      the M slots (floor(M/C) or one more) and cycles FIFO within it.

    Whatever a policy displaces or declines to admit is returned from
    :meth:`update`; nothing is silently discarded.

    Concurrency: one swap writer may call :meth:`replace` while readers
    call :meth:`draw`. Slot stores are serialized by per-partition locks;
    bookkeeping by a single metadata lock (always taken first). Reads do
    not lock — stale values are fine, torn ones impossible since a slot
    holds one reference.
    """

    def __init__(
        self,
        capacity: int,
        policy: UpdatePolicy | str = UpdatePolicy.RESERVOIR,
        partitions: int = 4,
    ):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if partitions < 1:
            raise ValueError("need at least one partition")
        partitions = min(partitions, capacity)  # a partition needs a slot
        self.capacity = capacity
        self.policy = UpdatePolicy(policy)
        self.slots: list[Optional[Sample]] = [None] * capacity
        self.seen_count = 0
        self._classes: dict[int, _ClassState] = {}
        self._observed: set[int] = set()
        self._free: list[int] = list(range(capacity - 1, -1, -1))  # pop() yields slot 0 first
        # contiguous ranges covering [0, capacity)
        step = capacity // partitions
        bounds = [i * step for i in range(partitions)] + [capacity]
        self.partitions: list[tuple[int, int]] = [
            (bounds[i], bounds[i + 1]) for i in range(partitions)
        ]
        self._meta_lock = threading.Lock()
        self._part_locks = [threading.Lock() for _ in range(partitions)]
        self._part_step = step

    # -- introspection ----------------------------------------------------

    def __len__(self) -> int:
        return self.capacity - len(self._free)

    @property
    def occupancy(self) -> int:
        return len(self)

    def class_counts(self) -> dict[int, int]:
        with self._meta_lock:
            return {c: len(st.slots) for c, st in self._classes.items()}

    def observed_classes(self) -> set[int]:
        return set(self._observed)

    def occupied_slots(self) -> list[int]:
        with self._meta_lock:
            return [i for i, s in enumerate(self.slots) if s is not None]

    def resident_ids(self) -> set[int]:
        return {s.id for s in self.slots if s is not None}

    def partition_of(self, slot_index: int) -> int:
        return min(slot_index // self._part_step, len(self.partitions) - 1)

    # -- slot plumbing (meta lock held by caller) --------------------------

    def _store(self, slot_index: int, sample: Sample) -> None:
        lock = self._part_locks[self.partition_of(slot_index)]
        with lock:
            self.slots[slot_index] = sample

    def _place(self, sample: Sample) -> int:
        idx = self._free.pop()
        self._store(idx, sample)
        self._classes.setdefault(sample.label, _ClassState()).slots.append(idx)
        return idx

    def _evict_slot(self, slot_index: int) -> Sample:
        old = self.slots[slot_index]
        lock = self._part_locks[self.partition_of(slot_index)]
        with lock:
            self.slots[slot_index] = None
        self._classes[old.label].slots.remove(slot_index)
        self._free.append(slot_index)
        return old

    def _swap_in_slot(self, slot_index: int, sample: Sample) -> Sample:
        """Replace the occupant of a slot, keeping class bookkeeping exact."""
        old = self.slots[slot_index]
        if old.label != sample.label:
            self._classes[old.label].slots.remove(slot_index)
            self._classes.setdefault(sample.label, _ClassState()).slots.append(slot_index)
        self._store(slot_index, sample)
        return old

    def _max_classes(self) -> list[int]:
        counts = {c: len(st.slots) for c, st in self._classes.items() if st.slots}
        if not counts:
            return []
        top = max(counts.values())
        return sorted(c for c, n in counts.items() if n == top)

    # -- update policies ---------------------------------------------------

    def update(self, incoming: Sequence[Sample], rng) -> list[Sample]:
        """Offer `incoming` to the memory; return every sample displaced or
        not admitted (the caller forwards these to the storage tier)."""
        if not incoming:
            raise ValueError("incoming must be nonempty")
        gen = as_generator(rng)
        evicted: list[Sample] = []
        with self._meta_lock:
            for s in incoming:
                self._observed.add(s.label)
                if self.policy is UpdatePolicy.RESERVOIR:
                    self._update_reservoir(s, gen, evicted)
                elif self.policy is UpdatePolicy.GREEDY_BALANCED:
                    self._update_greedy(s, gen, evicted)
                else:
                    self._update_ring(s, evicted)
        return evicted

    def _update_reservoir(self, s: Sample, gen, evicted: list[Sample]) -> None:
        self.seen_count += 1
        if self._free:
            self._place(s)
            return
        j = int(gen.integers(0, self.seen_count))
        if j < self.capacity:
            evicted.append(self._swap_in_slot(j, s))
        else:
            evicted.append(s)

    def _greedy_bounds(self) -> tuple[int, int]:
        """(lo, hi) class counts; lo counts observed-but-absent classes as 0
        whenever the observed class set still fits in memory."""
        counts = [len(st.slots) for st in self._classes.values() if st.slots]
        hi = max(counts, default=0)
        lo = min(counts, default=0)
        if len(self._observed) <= self.capacity and len(counts) < len(self._observed):
            lo = 0
        return lo, hi

    def _update_greedy(self, s: Sample, gen, evicted: list[Sample]) -> None:
        lo, hi = self._greedy_bounds()
        mine = len(self._classes[s.label].slots) if s.label in self._classes else 0
        # admit only if the post-insert spread stays <= 1 and, when full,
        # the sample's class is not already a majority class
        if len(self) > 0 and (mine > lo or (not self._free and mine >= hi)):
            evicted.append(s)
        else:
            if not self._free:
                evicted.append(self._evict_victim_of_max_class(gen))
            self._place(s)
        self._rebalance(gen, evicted)

    def _evict_victim_of_max_class(self, gen) -> Sample:
        cls = self._max_classes()
        label = cls[int(gen.integers(0, len(cls)))]
        slots = self._classes[label].slots
        victim = slots[int(gen.integers(0, len(slots)))]
        return self._evict_slot(victim)

    def _rebalance(self, gen, evicted: list[Sample]) -> None:
        # a newly observed class drops lo to 0, so this can shed many
        # majority-class samples at a task boundary; they all land in the
        # evicted list and flow to storage
        while True:
            lo, hi = self._greedy_bounds()
            if hi - lo <= 1:
                return
            evicted.append(self._evict_victim_of_max_class(gen))

    def _update_ring(self, s: Sample, evicted: list[Sample]) -> None:
        quotas = self._ring_quotas()
        # a newly observed class shrinks everyone's share; trim overflow oldest-first
        for label, st in self._classes.items():
            while len(st.slots) > quotas.get(label, 0):
                evicted.append(self._evict_slot(st.slots[0]))
        quota = quotas.get(s.label, 0)
        if quota == 0:
            evicted.append(s)
            return
        st = self._classes.setdefault(s.label, _ClassState())
        if len(st.slots) >= quota:
            evicted.append(self._evict_slot(st.slots[0]))
        self._place(s)

    def _ring_quotas(self) -> dict[int, int]:
        classes = sorted(self._observed)
        if not classes:
            return {}
        base, extra = divmod(self.capacity, len(classes))
        # remainder slots go to the lowest labels, deterministically
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    # -- training-side access ----------------------------------------------

    def draw(self, k: int, rng) -> list[tuple[int, Sample]]:
        """Return k distinct occupied slots chosen uniformly, with their
        samples. The memory itself is unchanged."""
        if k < 0:
            raise ValueError("k must be nonnegative")
        gen = as_generator(rng)
        with self._meta_lock:
            occupied = [i for i, s in enumerate(self.slots) if s is not None]
            if k > len(occupied):
                raise InsufficientSamples(f"asked for {k} of {len(occupied)} occupied slots")
            if k == 0:
                return []
            chosen = gen.choice(len(occupied), size=k, replace=False)
            return [(occupied[int(p)], self.slots[occupied[int(p)]]) for p in chosen]

    def replace(self, slot_index: int, replacement: Sample) -> None:
        """Point-replace the sample in an occupied slot (the swap path)."""
        if not 0 <= slot_index < self.capacity:
            raise InvalidSlot(f"slot {slot_index} outside [0, {self.capacity})")
        with self._meta_lock:
            if self.slots[slot_index] is None:
                raise EmptySlot(f"slot {slot_index} is empty")
            self._observed.add(replacement.label)
            self._swap_in_slot(slot_index, replacement)
