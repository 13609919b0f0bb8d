"""Experiment runner: declarative configs, per-task pipeline orchestration,
ablation sweeps, and the storage-latency speed experiment.

Per task the stages run in a fixed order: ingest the task's samples into the
stream buffer, train the bundle (swap requests fire from inside training),
drain the swap worker at the stage boundary, fold the stream samples into
episodic memory, flush everything the memory declined or displaced to the
archive, clear the buffer, then evaluate. End-of-run accounting checks that
every generated sample sits in exactly one tier.
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .gate import GateKind, GatePolicy
from .learner import (
    Bundle,
    BundleReport,
    MetricsRecord,
    MLPClassifier,
    TaskStream,
    Trainer,
    evaluate,
    train_bundle,
)
from .memory import EpisodicMemory, Sample, StreamBuffer, UpdatePolicy
from .rng import substream
from .storage import StorageArchive
from .swap import ASYNC, SYNC, SwapRequest, SwapStats, SwapWorker

MODE_OFF = "off"

# substream tags for deriving independent per-concern rngs from the run seed
_TAG_MODEL, _TAG_EM_UPDATE, _TAG_EM_DRAW, _TAG_GATE, _TAG_EVICT, _TAG_PICK = 1, 2, 3, 4, 5, 6


class ConfigError(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class StreamSpec:
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 100
    dim: int = 16
    stddev: float = 1.0
    mean_scale: float = 1.0
    eval_samples_per_class: int = 50


@dataclass
class EmSpec:
    capacity: int = 40
    policy: str = "ring_equal_class"
    partitions: int = 4


@dataclass
class StorageSpec:
    capacity: Optional[int] = None  # None = unbounded
    latency_ms: float = 0.0
    root: Optional[str] = None  # default: fresh dir under the output path


@dataclass
class GateSpec:
    kind: str = "entropy"
    swap_ratio: float = 1.0


@dataclass
class SwapSpec:
    mode: str = ASYNC  # sync | async | off
    concurrency: int = 8


@dataclass
class TrainerSpec:
    hidden: int = 64
    lr: float = 0.05
    weight_decay: float = 1e-6
    batch_size: int = 32
    passes: int = 4
    old_fraction: float = 0.5
    alpha: float = 0.0
    bundle_size: Optional[int] = None  # None = whole task per bundle;
    # set to batch_size (with passes=1) for streaming single-pass bundling


@dataclass
class ExperimentConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    em: EmSpec = field(default_factory=EmSpec)
    storage: StorageSpec = field(default_factory=StorageSpec)
    gate: GateSpec = field(default_factory=GateSpec)
    swap: SwapSpec = field(default_factory=SwapSpec)
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    compute_delay_ms: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [1])
    output: Optional[str] = None

    # -- (de)serialization ---------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        sections = {
            "stream": StreamSpec, "em": EmSpec, "storage": StorageSpec,
            "gate": GateSpec, "swap": SwapSpec, "trainer": TrainerSpec,
        }
        for key, value in (raw or {}).items():
            if key in sections:
                spec_cls = sections[key]
                known = spec_cls().__dict__
                for f, v in (value or {}).items():
                    if f not in known:
                        raise ConfigError(f"{key}.{f}", "unknown field")
                setattr(cfg, key, spec_cls(**{**known, **(value or {})}))
            elif key in ("compute_delay_ms", "seeds", "output"):
                setattr(cfg, key, value)
            else:
                raise ConfigError(key, "unknown section")
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f) or {})

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        def need(cond: bool, path: str, msg: str):
            if not cond:
                raise ConfigError(path, msg)

        s = self.stream
        need(s.num_tasks > 0, "stream.num_tasks", "must be positive")
        need(s.classes_per_task > 0, "stream.classes_per_task", "must be positive")
        need(s.samples_per_class > 0, "stream.samples_per_class", "must be positive")
        need(s.dim > 0, "stream.dim", "must be positive")
        need(s.stddev >= 0, "stream.stddev", "must be nonnegative")
        need(self.em.capacity > 0, "em.capacity", "must be positive")
        need(1 <= self.em.partitions <= self.em.capacity, "em.partitions", "must be in [1, capacity]")
        try:
            UpdatePolicy(self.em.policy)
        except ValueError:
            raise ConfigError("em.policy", f"unknown policy {self.em.policy!r}")
        need(self.storage.capacity is None or self.storage.capacity >= 0, "storage.capacity", "must be >= 0 or null")
        need(self.storage.latency_ms >= 0, "storage.latency_ms", "must be nonnegative")
        try:
            GateKind(self.gate.kind)
        except ValueError:
            raise ConfigError("gate.kind", f"unknown kind {self.gate.kind!r}")
        need(0.0 <= self.gate.swap_ratio <= 1.0, "gate.swap_ratio", "must be in [0, 1]")
        need(self.swap.mode in (SYNC, ASYNC, MODE_OFF), "swap.mode", "must be sync, async, or off")
        need(self.swap.concurrency >= 1, "swap.concurrency", "must be >= 1")
        t = self.trainer
        need(t.hidden > 0, "trainer.hidden", "must be positive")
        need(t.batch_size > 0, "trainer.batch_size", "must be positive")
        need(t.passes > 0, "trainer.passes", "must be positive")
        need(0.0 <= t.old_fraction <= 1.0, "trainer.old_fraction", "must be in [0, 1]")
        need(0.0 <= t.alpha <= 1.0, "trainer.alpha", "must be in [0, 1]")
        need(t.bundle_size is None or t.bundle_size > 0, "trainer.bundle_size", "must be positive or null")
        need(self.compute_delay_ms >= 0, "compute_delay_ms", "must be nonnegative")
        need(len(self.seeds) > 0, "seeds", "need at least one seed")


@dataclass
class RunResult:
    seed: int
    config_hash: str
    metrics: MetricsRecord
    swap_stats: Optional[SwapStats]
    bundle_reports: list[BundleReport]
    audit: dict

    def summary(self) -> dict:
        final_acc, final_fgt, inc = self.metrics.compute()
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "final_accuracy": final_acc,
            "final_forgetting": final_fgt,
            "incremental_accuracy": inc,
            "swap_items_submitted": sum(r.swap_items_submitted for r in self.bundle_reports),
            "stale_draws": sum(r.stale_draws for r in self.bundle_reports),
            "audit_ok": self.audit.get("ok"),
        }


def conservation_audit(generated_ids: set[int], em: EpisodicMemory, archive: Optional[StorageArchive], discarded: set[int]) -> dict:
    """Every generated sample must land in exactly one tier.

    With storage disabled, samples the memory declined are plain discards
    and stand in for the storage tiers.
    """
    em_ids = em.resident_ids()
    live = archive.live_ids() if archive else set()
    dead = archive.evicted_ids() if archive else set()
    tiers = {"em": em_ids, "storage_live": live, "storage_evicted": dead, "discarded": discarded}
    union = set().union(*tiers.values())
    overlaps = {}
    names = list(tiers)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            inter = tiers[a] & tiers[b]
            if inter:
                overlaps[f"{a}&{b}"] = len(inter)
    missing = generated_ids - union
    extra = union - generated_ids
    return {
        "ok": not overlaps and not missing and not extra,
        "counts": {k: len(v) for k, v in tiers.items()},
        "overlaps": overlaps,
        "missing": len(missing),
        "unexpected": len(extra),
    }


def run_experiment(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    out_dir: Optional[str | Path] = None,
    keep_storage: bool = False,
) -> RunResult:
    """One full continual-learning run for one seed."""
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    swapping = cfg.swap.mode != MODE_OFF and cfg.gate.swap_ratio > 0

    stream = TaskStream(
        num_tasks=cfg.stream.num_tasks,
        classes_per_task=cfg.stream.classes_per_task,
        samples_per_class=cfg.stream.samples_per_class,
        dim=cfg.stream.dim,
        stddev=cfg.stream.stddev,
        mean_scale=cfg.stream.mean_scale,
        seed=seed,
        eval_samples_per_class=cfg.stream.eval_samples_per_class,
    )
    em = EpisodicMemory(cfg.em.capacity, policy=cfg.em.policy, partitions=cfg.em.partitions)
    model = MLPClassifier(cfg.stream.dim, stream.total_classes, hidden=cfg.trainer.hidden, rng=substream(seed, _TAG_MODEL))
    trainer = Trainer(model, lr=cfg.trainer.lr, weight_decay=cfg.trainer.weight_decay, alpha=cfg.trainer.alpha)

    archive = None
    worker = None
    tmp_root = None
    if cfg.swap.mode != MODE_OFF:
        if cfg.storage.root:
            root = Path(cfg.storage.root)
        else:
            tmp_root = tempfile.mkdtemp(prefix=f"tieredreplay-s{seed}-")
            root = Path(tmp_root)
        archive = StorageArchive(
            root,
            capacity=cfg.storage.capacity,
            read_latency_ms=cfg.storage.latency_ms,
            io_concurrency=cfg.swap.concurrency,
            rng_seed=int(substream(seed, _TAG_EVICT).integers(0, 2**31)),
        )
        if swapping:
            worker = SwapWorker(em, archive, mode=cfg.swap.mode, rng_seed=int(substream(seed, _TAG_PICK).integers(0, 2**31)))

    gate_policy = GatePolicy(kind=cfg.gate.kind, swap_ratio=cfg.gate.swap_ratio) if swapping else None
    draw_rng = substream(seed, _TAG_EM_DRAW)
    gate_rng = substream(seed, _TAG_GATE)
    update_rng = substream(seed, _TAG_EM_UPDATE)

    metrics = MetricsRecord(num_tasks=cfg.stream.num_tasks)
    reports: list[BundleReport] = []
    generated: set[int] = set()
    discarded: set[int] = set()
    buffer = StreamBuffer(capacity=cfg.stream.classes_per_task * cfg.stream.samples_per_class)

    try:
        for task in range(cfg.stream.num_tasks):
            samples = stream.generate_task(task)
            generated.update(s.id for s in samples)
            trainer.begin_task(stream.task_classes(task))

            step = cfg.trainer.bundle_size or len(samples)
            for start in range(0, len(samples), step):
                t0 = time.perf_counter()
                for s in samples[start : start + step]:
                    buffer.enqueue(s)

                bundle = Bundle(
                    new_samples=list(buffer.entries),
                    passes=cfg.trainer.passes,
                    batch_size=cfg.trainer.batch_size,
                    old_fraction=cfg.trainer.old_fraction,
                )
                report = train_bundle(
                    trainer, bundle, em,
                    gate_policy=gate_policy,
                    swap_worker=worker,
                    draw_rng=draw_rng,
                    gate_rng=gate_rng,
                    compute_delay_ms=cfg.compute_delay_ms,
                )
                reports.append(report)
                if worker is not None:
                    # stage boundary: memory updating must not race in-flight swaps
                    worker.drain()

                evicted = em.update(buffer.entries, update_rng)
                if archive is not None:
                    archive.put(evicted)
                else:
                    discarded.update(s.id for s in evicted)
                buffer.drain()
                metrics.wall_time_per_bundle.append(time.perf_counter() - t0)

            metrics.record_row(task, evaluate(trainer, stream, task))

        audit = conservation_audit(generated, em, archive, discarded)
    finally:
        stats = None
        if worker is not None:
            try:
                stats = worker.stop()
            except Exception:
                stats = worker.snapshot()
        if archive is not None:
            archive.close()

    result = RunResult(
        seed=seed,
        config_hash=cfg.config_hash(),
        metrics=metrics,
        swap_stats=stats,
        bundle_reports=reports,
        audit=audit,
    )
    if out_dir is not None:
        write_run_outputs(Path(out_dir), cfg, [result])
    if tmp_root is not None and not keep_storage:
        shutil.rmtree(tmp_root, ignore_errors=True)
    return result


def run_repeats(cfg: ExperimentConfig, out_dir: Optional[str | Path] = None) -> list[RunResult]:
    """One run per configured seed, plus a mean/std summary when written out."""
    results = [run_experiment(cfg, seed=s) for s in cfg.seeds]
    if out_dir is not None:
        write_run_outputs(Path(out_dir), cfg, results)
    return results


SWEEP_AXES = ("em_size", "swap_ratio", "storage_capacity", "num_tasks")


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    clone = ExperimentConfig.from_dict(cfg.to_dict())
    if axis == "em_size":
        clone.em.capacity = int(value)
    elif axis == "swap_ratio":
        clone.gate.swap_ratio = float(value)
    elif axis == "storage_capacity":
        clone.storage.capacity = None if value in (None, "none", "unbounded") else int(value)
    elif axis == "num_tasks":
        clone.stream.num_tasks = int(value)
    else:
        raise ConfigError("axis", f"must be one of {SWEEP_AXES}")
    clone.validate()
    return clone


def run_sweep(cfg: ExperimentConfig, axis: str, values: list, out_dir: Optional[str | Path] = None) -> dict:
    """One multi-seed run per axis value, sharing seeds across values."""
    table = []
    all_results = {}
    for value in values:
        point = _apply_axis(cfg, axis, value)
        results = run_repeats(point)
        all_results[str(value)] = results
        finals = [r.metrics.compute() for r in results]
        accs = [f[0] for f in finals]
        fgts = [f[1] for f in finals]
        table.append({
            "axis": axis,
            "value": value,
            "runs": len(results),
            "final_accuracy_mean": float(np.mean(accs)),
            "final_accuracy_std": float(np.std(accs)),
            "final_forgetting_mean": float(np.mean(fgts)),
            "final_forgetting_std": float(np.std(fgts)),
        })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv", table)
        (out / "sweep.json").write_text(json.dumps(table, indent=2))
    return {"axis": axis, "table": table, "results": all_results}


# ---------------------------------------------------------------------------
# speed experiment
# ---------------------------------------------------------------------------


def run_speed_test(
    cfg: ExperimentConfig,
    modes: tuple[str, ...] = (MODE_OFF, SYNC, ASYNC),
    batches: int = 200,
    items_per_batch: int = 10,
    out_dir: Optional[str | Path] = None,
) -> list[dict]:
    """Wall-time comparison of swap modes under injected storage latency.

    Per-batch compute is simulated by sleeping compute_delay_ms, so the
    numbers depend only on the configured delays, not on the host model.
    """
    if cfg.compute_delay_ms <= 0:
        raise ConfigError("compute_delay_ms", "speed test needs a positive compute delay")
    rows = []
    off_per_batch = None
    for mode in modes:
        wall = _speed_run(cfg, mode, batches, items_per_batch)
        per_batch_ms = 1000.0 * wall / batches
        row = {"mode": mode, "total_s": round(wall, 6), "per_batch_ms": round(per_batch_ms, 4)}
        if mode == MODE_OFF:
            off_per_batch = per_batch_ms
            row["overhead_pct"] = 0.0
        elif off_per_batch:
            row["overhead_pct"] = round(100.0 * (per_batch_ms - off_per_batch) / off_per_batch, 2)
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "timings.csv", rows)
    return rows


def _speed_run(cfg: ExperimentConfig, mode: str, batches: int, items_per_batch: int) -> float:
    m = cfg.em.capacity
    dim = cfg.stream.dim
    classes = max(2, cfg.stream.classes_per_task)
    em = EpisodicMemory(m, policy=UpdatePolicy.RESERVOIR, partitions=cfg.em.partitions)
    feats = np.zeros(dim, dtype=np.float32)
    em.update([Sample(id=i, label=i % classes, task=0, features=feats) for i in range(m)], rng=0)

    tmp = tempfile.mkdtemp(prefix=f"tieredreplay-speed-{mode}-")
    archive = None
    worker = None
    try:
        if mode != MODE_OFF:
            archive = StorageArchive(
                tmp,
                read_latency_ms=cfg.storage.latency_ms,
                io_concurrency=cfg.swap.concurrency,
                rng_seed=7,
            )
            spare_per_class = max(4, 2 * (batches * items_per_batch) // max(1, classes * m))
            archive.put([
                Sample(id=1_000_000 + i, label=i % classes, task=0, features=feats)
                for i in range(classes * max(m, spare_per_class))
            ])
            worker = SwapWorker(em, archive, mode=mode, rng_seed=11)

        draw_rng = substream(99, _TAG_EM_DRAW)
        delay_s = cfg.compute_delay_ms / 1000.0
        t0 = time.perf_counter()
        for b in range(batches):
            time.sleep(delay_s)  # stands in for the training step
            draws = em.draw(min(items_per_batch, len(em)), draw_rng)
            if worker is not None:
                worker.record_draw([slot for slot, _ in draws])
                pending = worker.pending_slots()
                items = [(slot, s) for slot, s in draws if slot not in pending]
                if items:
                    worker.submit(SwapRequest(batch_index=b, items=items))
        if worker is not None:
            worker.drain()
        wall = time.perf_counter() - t0
        if worker is not None:
            worker.stop()
    finally:
        if archive is not None:
            archive.close()
        shutil.rmtree(tmp, ignore_errors=True)
    return wall


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)


def write_run_outputs(out: Path, cfg: ExperimentConfig, results: list[RunResult]) -> None:
    """metrics.csv, summary.json, swapstats.json, timings.csv."""
    out.mkdir(parents=True, exist_ok=True)
    metric_rows = []
    timing_rows = []
    for r in results:
        for row in r.metrics.csv_rows():
            metric_rows.append({"seed": r.seed, **row})
        for i, w in enumerate(r.metrics.wall_time_per_bundle):
            timing_rows.append({"seed": r.seed, "bundle": i, "wall_time_s": round(w, 6)})
    _write_csv(out / "metrics.csv", metric_rows)
    _write_csv(out / "timings.csv", timing_rows)

    finals = [r.metrics.compute() for r in results]
    summary = {
        "config_hash": results[0].config_hash if results else cfg.config_hash(),
        "config": cfg.to_dict(),
        "runs": [r.summary() for r in results],
        "final_accuracy_mean": float(np.mean([f[0] for f in finals])),
        "final_accuracy_std": float(np.std([f[0] for f in finals])),
        "final_forgetting_mean": float(np.mean([f[1] for f in finals])),
        "final_forgetting_std": float(np.std([f[1] for f in finals])),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    stats = {str(r.seed): (r.swap_stats.as_dict() if r.swap_stats else None) for r in results}
    (out / "swapstats.json").write_text(json.dumps(stats, indent=2))
