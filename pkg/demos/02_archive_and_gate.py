# The storage tier and the scoring gate, in isolation.
#
# Part 1 writes samples into an on-disk archive, forces class-balanced
# evictions, and reopens the directory to show crash-style durability.
# Part 2 scores a mini-batch with the entropy gate and shows which samples
# it would swap out at different ratios.

import tempfile

import numpy as np

from tieredreplay import (
    GatePolicy,
    Sample,
    ScoreInputs,
    StorageArchive,
    gate_select,
    score_entropy,
)

rng = np.random.default_rng(7)

# --- archive: bounded capacity, balanced eviction, reopen ------------------

root = tempfile.mkdtemp(prefix="archive-demo-")
archive = StorageArchive(root, capacity=12, rng_seed=1)
victims = archive.put([
    Sample(id=i, label=i % 3, task=0, features=rng.standard_normal(8)) for i in range(20)
])
print(f"put 20 samples into capacity 12: victims={victims}")
print(f"per-class live counts (stay balanced): {archive.class_counts()}")

ticket = archive.request(sorted(archive.live_ids())[0])
ticket.wait()
print(f"async read round trip: sample {ticket.sample.id}, {len(ticket.sample.features)} floats")
archive.close()

reopened = StorageArchive.open(root)
print(f"reopened archive: {reopened.live_count} live, {len(reopened.evicted_ids())} tombstones\n")
reopened.close()

# --- gate: scores rank keep-worthiness ------------------------------------

def batch_entry(sid, p_top, correct):
    probs = np.full(4, (1 - p_top) / 3)
    probs[0] = p_top
    pred = 0
    true = 0 if correct else 1
    return ScoreInputs(sample_id=sid, slot_index=sid, predicted_label=pred,
                       true_label=true, class_probs=probs)

batch = [
    batch_entry(0, 0.97, correct=True),   # confident and right: cheap to swap
    batch_entry(1, 0.40, correct=True),   # right but unsure
    batch_entry(2, 0.40, correct=False),  # wrong and unsure
    batch_entry(3, 0.97, correct=False),  # confident and wrong: keep training it
]
for s in batch:
    print(f"sample {s.sample_id}: score {score_entropy(s, 4):.3f}")

for ratio in (0.25, 0.5, 1.0):
    decision = gate_select(batch, GatePolicy(kind="entropy", swap_ratio=ratio), rng=0)
    print(f"ratio {ratio}: swap out {[sid for _, sid in decision.swap_out]}")
