"""Desk-scale class-incremental learner.

Tasks are synthetic Gaussian clusters (one mean per class, disjoint class
sets per task), the classifier is a one-hidden-layer tanh perceptron trained
with SGD, and old samples enter a mini-batch only by being drawn from
episodic memory. Storage content reaches training exclusively through the
swap worker refreshing memory slots between mini-batches.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gate import GateDecision, GatePolicy, ScoreInputs, gate_select, swap_count
from .memory import EpisodicMemory, Sample
from .rng import as_generator, substream
from .swap import SwapRequest, SwapWorker

_MEANS_TAG = 101
_TASK_TAG = 202
_EVAL_TAG = 303
_EVAL_ID_BASE = 1 << 40


class TaskOutOfRange(Exception):
    pass


class MissingSnapshot(Exception):
    """Distillation weight is positive but no frozen old model exists."""


class IncompleteMatrix(Exception):
    """Accuracy matrix is missing cells needed by the requested metric."""


# ---------------------------------------------------------------------------
# synthetic stream
# ---------------------------------------------------------------------------


@dataclass
class TaskStream:
    """Deterministic class-incremental stream of Gaussian clusters.

    Class c's samples are mean_c + stddev * N(0, I) in R^dim, with means
    drawn once from N(0, mean_scale^2 * I). Same seed, same stream —
    including sample ids. Evaluation draws come from a disjoint substream.
    """

    num_tasks: int
    classes_per_task: int
    samples_per_class: int
    dim: int
    stddev: float = 1.0
    mean_scale: float = 1.0
    seed: int = 0
    eval_samples_per_class: int = 50

    def __post_init__(self):
        if min(self.num_tasks, self.classes_per_task, self.samples_per_class, self.dim) <= 0:
            raise ValueError("stream dimensions must be positive")
        gen = substream(self.seed, _MEANS_TAG)
        self._means = gen.normal(0.0, self.mean_scale, (self.total_classes, self.dim))

    @property
    def total_classes(self) -> int:
        return self.num_tasks * self.classes_per_task

    def task_classes(self, task: int) -> range:
        self._check(task)
        return range(task * self.classes_per_task, (task + 1) * self.classes_per_task)

    def class_mean(self, label: int) -> np.ndarray:
        return self._means[label]

    def _check(self, task: int) -> None:
        if not 0 <= task < self.num_tasks:
            raise TaskOutOfRange(f"task {task} outside [0, {self.num_tasks})")

    def generate_task(self, task: int) -> list[Sample]:
        """The task's training samples in a shuffled, seed-stable order."""
        self._check(task)
        gen = np.random.default_rng([self.seed, _TASK_TAG, task])
        labels = np.repeat(list(self.task_classes(task)), self.samples_per_class)
        gen.shuffle(labels)
        base = task * self.classes_per_task * self.samples_per_class
        out = []
        for j, label in enumerate(labels):
            x = self._means[label] + self.stddev * gen.standard_normal(self.dim)
            out.append(Sample(id=base + j, label=int(label), task=task, features=x))
        return out

    def generate_eval(self, task: int) -> tuple[np.ndarray, np.ndarray]:
        """Held-out (X, y) for one task; never fed to the tiers."""
        self._check(task)
        gen = np.random.default_rng([self.seed, _EVAL_TAG, task])
        ys, xs = [], []
        for label in self.task_classes(task):
            xs.append(self._means[label] + self.stddev * gen.standard_normal((self.eval_samples_per_class, self.dim)))
            ys.append(np.full(self.eval_samples_per_class, label))
        return np.vstack(xs), np.concatenate(ys)


# ---------------------------------------------------------------------------
# model and trainer
# ---------------------------------------------------------------------------


class MLPClassifier:
    """One hidden tanh layer over all classes the run can ever see."""

    def __init__(self, dim: int, num_classes: int, hidden: int = 64, rng=0):
        gen = as_generator(rng)
        self.W1 = gen.normal(0.0, 1.0 / math.sqrt(dim), (dim, hidden))
        self.b1 = np.zeros(hidden)
        self.W2 = gen.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, num_classes))
        self.b2 = np.zeros(num_classes)

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    def hidden_acts(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1 + self.b1)

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.hidden_acts(X) @ self.W2 + self.b2

    def copy(self) -> "MLPClassifier":
        dup = object.__new__(MLPClassifier)
        dup.W1, dup.b1 = self.W1.copy(), self.b1.copy()
        dup.W2, dup.b2 = self.W2.copy(), self.b2.copy()
        return dup

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params().values())


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Trainer:
    """SGD trainer with an optional distillation-mixed loss.

    loss = alpha * soft + (1 - alpha) * hard, where `hard` is cross-entropy
    over every class seen so far and `soft` is cross-entropy of the current
    model's old-class softmax against the frozen snapshot's. The snapshot is
    refreshed at task boundaries; before any old classes exist the soft term
    is vacuous and alpha is ignored.
    """

    def __init__(
        self,
        model: MLPClassifier,
        lr: float = 0.05,
        weight_decay: float = 1e-6,
        alpha: float = 0.0,
    ):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.snapshot: Optional[MLPClassifier] = None
        self.seen_classes: list[int] = []
        self.old_classes: list[int] = []

    def begin_task(self, new_classes: Sequence[int]) -> None:
        """Mark a task boundary: snapshot the model, widen the seen set."""
        if self.seen_classes:
            self.snapshot = self.model.copy()
        self.old_classes = list(self.seen_classes)
        merged = set(self.seen_classes) | set(int(c) for c in new_classes)
        self.seen_classes = sorted(merged)

    # -- loss ---------------------------------------------------------------

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        if not self.seen_classes:
            raise ValueError("no classes seen yet; call begin_task first")
        n = X.shape[0]
        seen = np.asarray(self.seen_classes)
        alpha = self.alpha if self.old_classes else 0.0
        if self.alpha > 0 and self.old_classes and self.snapshot is None:
            raise MissingSnapshot("alpha > 0 with old classes but no snapshot")

        h = self.model.hidden_acts(X)
        z = h @ self.model.W2 + self.model.b2
        dz = np.zeros_like(z)

        p_seen = _softmax(z[:, seen])
        pos = np.searchsorted(seen, y)
        hard = float(-np.mean(np.log(np.maximum(p_seen[np.arange(n), pos], 1e-300))))
        grad_seen = p_seen.copy()
        grad_seen[np.arange(n), pos] -= 1.0
        dz[:, seen] += (1.0 - alpha) * grad_seen / n

        soft = 0.0
        if alpha > 0:
            old = np.asarray(self.old_classes)
            q = _softmax(self.snapshot.logits(X)[:, old])
            p_old = _softmax(z[:, old])
            soft = float(-np.mean((q * np.log(np.maximum(p_old, 1e-300))).sum(axis=1)))
            dz[:, old] += alpha * (p_old - q) / n

        loss = alpha * soft + (1.0 - alpha) * hard
        dW2 = h.T @ dz
        db2 = dz.sum(axis=0)
        dh = dz @ self.model.W2.T
        da = dh * (1.0 - h * h)
        grads = {"W1": X.T @ da, "b1": da.sum(axis=0), "W2": dW2, "b2": db2}
        return loss, grads

    def train_step(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """One SGD step; returns (loss, pre-update softmax over seen classes)."""
        seen = np.asarray(self.seen_classes)
        probs = _softmax(self.model.logits(X)[:, seen])
        loss, grads = self.loss_and_grads(X, y)
        m = self.model
        for name, g in grads.items():
            p = getattr(m, name)
            p -= self.lr * (g + self.weight_decay * p)
        return loss, probs

    # -- inference ------------------------------------------------------------

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Argmax over classes seen so far (no task id), lowest index on ties."""
        seen = np.asarray(self.seen_classes)
        scores = self.model.logits(X)[:, seen]
        return seen[np.argmax(scores, axis=1)]


# ---------------------------------------------------------------------------
# bundle training
# ---------------------------------------------------------------------------


@dataclass
class Bundle:
    new_samples: list[Sample]
    passes: int = 1
    batch_size: int = 32
    old_fraction: float = 0.5

    def __post_init__(self):
        if self.passes <= 0 or self.batch_size <= 0:
            raise ValueError("passes and batch_size must be positive")
        if not 0.0 <= self.old_fraction <= 1.0:
            raise ValueError("old_fraction must be in [0, 1]")


@dataclass
class BundleReport:
    batches: int = 0
    optimizer_steps: int = 0
    swap_items_submitted: int = 0
    stale_draws: int = 0
    mean_loss: float = 0.0
    wall_time: float = 0.0


def train_bundle(
    trainer: Trainer,
    bundle: Bundle,
    em: EpisodicMemory,
    gate_policy: Optional[GatePolicy] = None,
    swap_worker: Optional[SwapWorker] = None,
    draw_rng=0,
    gate_rng=0,
    compute_delay_ms: float = 0.0,
) -> BundleReport:
    """Run every pass of one training bundle.

    Each mini-batch stacks old_fraction drawn memory samples on top of fresh
    stream samples, takes one SGD step, scores the drawn part, and hands the
    gate's swap-out picks to the worker. Later mini-batches see whatever the
    worker has already swapped in.
    """
    draw_gen = as_generator(draw_rng)
    gate_gen = as_generator(gate_rng)
    report = BundleReport()
    t0 = time.perf_counter()
    loss_sum = 0.0

    n_old_target = swap_count(bundle.old_fraction, bundle.batch_size)
    n_new_per_batch = bundle.batch_size - n_old_target
    new = bundle.new_samples
    batch_index = 0

    for pass_index in range(bundle.passes):
        if n_new_per_batch > 0 and new:
            order = draw_gen.permutation(len(new))
            chunks = [order[i : i + n_new_per_batch] for i in range(0, len(new), n_new_per_batch)]
        else:
            # pure-replay bundle: keep the same number of steps a full pass would take
            chunks = [np.array([], dtype=int)] * max(1, math.ceil(len(new) / bundle.batch_size))
        for chunk in chunks:
            new_part = [new[i] for i in chunk]
            k_old = min(n_old_target, len(em))
            draws = em.draw(k_old, draw_gen) if k_old > 0 else []
            if swap_worker is not None and draws:
                report.stale_draws += swap_worker.record_draw([slot for slot, _ in draws])
            batch = new_part + [s for _, s in draws]
            if not batch:
                continue
            X = np.stack([s.features.astype(np.float64) for s in batch])
            y = np.array([s.label for s in batch])
            loss, probs = trainer.train_step(X, y)
            loss_sum += loss
            report.optimizer_steps += 1

            if (
                gate_policy is not None
                and swap_worker is not None
                and draws
                and len(trainer.seen_classes) >= 2
            ):
                seen = np.asarray(trainer.seen_classes)
                offset = len(new_part)
                score_inputs = [
                    ScoreInputs(
                        sample_id=s.id,
                        slot_index=slot,
                        predicted_label=int(seen[int(np.argmax(probs[offset + i]))]),
                        true_label=s.label,
                        class_probs=probs[offset + i],
                    )
                    for i, (slot, s) in enumerate(draws)
                ]
                policy = GatePolicy(
                    kind=gate_policy.kind,
                    swap_ratio=gate_policy.swap_ratio,
                    pass_index=pass_index,
                    total_passes=bundle.passes,
                )
                decision = gate_select(score_inputs, policy, gate_gen)
                items = _swap_items(decision, draws, swap_worker)
                if items:
                    swap_worker.submit(SwapRequest(batch_index=batch_index, items=items))
                    report.swap_items_submitted += len(items)

            if compute_delay_ms > 0:
                time.sleep(compute_delay_ms / 1000.0)
            batch_index += 1
            report.batches += 1

    report.mean_loss = loss_sum / report.optimizer_steps if report.optimizer_steps else 0.0
    report.wall_time = time.perf_counter() - t0
    return report


def _swap_items(
    decision: GateDecision, draws: list[tuple[int, Sample]], worker: SwapWorker
) -> list[tuple[int, Sample]]:
    # skip slots whose previous swap has not landed yet: re-requesting them
    # would archive a sample that is already back in storage
    by_slot = dict(draws)
    pending = worker.pending_slots()
    return [(slot, by_slot[slot]) for slot, _sid in decision.swap_out if slot not in pending]


# ---------------------------------------------------------------------------
# evaluation and metrics
# ---------------------------------------------------------------------------


def evaluate(trainer: Trainer, stream: TaskStream, upto_task: int) -> list[float]:
    """Accuracy (percent) on each task's held-out set, predicting over every
    class seen so far."""
    row = []
    for task in range(upto_task + 1):
        X, y = stream.generate_eval(task)
        pred = trainer.predict(X)
        row.append(100.0 * float(np.mean(pred == y)))
    return row


@dataclass
class MetricsRecord:
    """acc[j][t] = accuracy on task j's classes after training task t."""

    num_tasks: int
    acc: np.ndarray = field(default=None)
    wall_time_per_bundle: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.acc is None:
            self.acc = np.full((self.num_tasks, self.num_tasks), np.nan)

    def record_row(self, after_task: int, row: Sequence[float]) -> None:
        for j, a in enumerate(row):
            self.acc[j, after_task] = a

    def compute(self) -> tuple[float, float, list[float]]:
        """(final_accuracy, final_forgetting, incremental_accuracy).

        Forgetting per task is best-ever accuracy minus final accuracy; the
        average runs over all tasks, including the last one's zero.
        """
        T = self.num_tasks
        for j in range(T):
            if np.isnan(self.acc[j, j:]).any():
                raise IncompleteMatrix(f"missing accuracy cells for task {j}")
        final_acc = float(np.mean(self.acc[:, T - 1]))
        forgetting = [float(np.nanmax(self.acc[j, j:]) - self.acc[j, T - 1]) for j in range(T)]
        incremental = [float(np.mean([self.acc[j, t] for j in range(t + 1)])) for t in range(T)]
        return final_acc, float(np.mean(forgetting)), incremental

    def to_dict(self) -> dict:
        final_acc, final_fgt, inc = self.compute()
        cells = np.where(np.isnan(self.acc), None, np.round(self.acc, 6))
        return {
            "num_tasks": self.num_tasks,
            "acc": cells.tolist(),
            "final_accuracy": final_acc,
            "final_forgetting": final_fgt,
            "incremental_accuracy": inc,
            "wall_time_per_bundle_s": self.wall_time_per_bundle,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for j in range(self.num_tasks):
            for t in range(j, self.num_tasks):
                rows.append({"record": "cell", "task": j, "after_task": t, "value": round(float(self.acc[j, t]), 6)})
        final_acc, final_fgt, inc = self.compute()
        rows.append({"record": "final_accuracy", "task": "", "after_task": "", "value": round(final_acc, 6)})
        rows.append({"record": "final_forgetting", "task": "", "after_task": "", "value": round(final_fgt, 6)})
        for t, v in enumerate(inc):
            rows.append({"record": "incremental_accuracy", "task": "", "after_task": t, "value": round(v, 6)})
        return rows
