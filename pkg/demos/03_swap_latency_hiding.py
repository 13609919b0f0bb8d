# Why retrieval runs asynchronously: sync swapping serializes training with
# storage reads, async overlaps them. Per-batch compute is simulated with a
# sleep so the effect is visible on any machine.

from tieredreplay import ExperimentConfig, run_speed_test

cfg = ExperimentConfig.from_dict({
    "stream": {"num_tasks": 1, "classes_per_task": 4, "samples_per_class": 10, "dim": 8},
    "em": {"capacity": 40},
    "storage": {"latency_ms": 5.0},      # one storage read costs 5 ms
    "swap": {"mode": "sync", "concurrency": 10},
    "compute_delay_ms": 10.0,            # one mini-batch costs 10 ms
    "seeds": [1],
})

rows = run_speed_test(cfg, batches=60, items_per_batch=10)
print(f"{'mode':>6} {'ms/batch':>9} {'overhead':>9}")
for row in rows:
    print(f"{row['mode']:>6} {row['per_batch_ms']:>9.2f} {row['overhead_pct']:>8.1f}%")
print("\nasync hides the 10 reads behind the next batch's compute; sync pays for them.")
