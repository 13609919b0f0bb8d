# How the three episodic-memory update policies behave on the same stream.
#
# A 12-slot memory watches 3 tasks of 2 classes arrive (40 samples per
# class). Whatever a policy declines or displaces would flow to storage in
# the full pipeline; here we just count it.

import numpy as np

from tieredreplay import EpisodicMemory, Sample, UpdatePolicy

rng = np.random.default_rng(0)


def stream():
    sid = 0
    for task in range(3):
        for _ in range(40):
            for cls in (2 * task, 2 * task + 1):
                yield Sample(id=sid, label=cls, task=task, features=rng.standard_normal(4))
                sid += 1


for policy in UpdatePolicy:
    em = EpisodicMemory(12, policy=policy)
    update_rng = np.random.default_rng(1)  # one long-lived stream per concern
    overflow = 0
    for s in stream():
        overflow += len(em.update([s], rng=update_rng))
    counts = dict(sorted(em.class_counts().items()))
    print(f"{policy.value:18s} resident per class {counts}  overflow -> storage: {overflow}")

# reservoir keeps a uniform sample of the whole stream, so early classes
# survive; the ring and greedy balancers equalize shares per class.

em = EpisodicMemory(10, policy=UpdatePolicy.RESERVOIR)
update_rng = np.random.default_rng(2)
for s in stream():
    em.update([s], rng=update_rng)
tasks = sorted(s.task for s in em.slots if s is not None)
print("\nreservoir task mix of a 240-sample stream in 10 slots:", tasks)
