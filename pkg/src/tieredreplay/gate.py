"""Swap gate: scores the memory samples drawn for a mini-batch and picks the
fraction to replace from storage.

A score near 0 marks a sample the model already handles with confidence
(cheap to part with); near 1 marks one still earning its slot. Selection
takes the k lowest-scored, k = round(ratio * batch), so the per-batch I/O
budget is exact regardless of the score distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .rng import as_generator

PROB_TOLERANCE = 1e-6
_CLAMP = 1e-12


class DegenerateDistribution(Exception):
    """class_probs has a negative entry or does not sum to 1."""


class EmptyBatch(Exception):
    pass


class GateKind(str, Enum):
    RANDOM = "random"
    ENTROPY = "entropy"
    DYNAMIC = "dynamic"


@dataclass
class ScoreInputs:
    sample_id: int
    slot_index: int
    predicted_label: int
    true_label: int
    class_probs: Sequence[float]


@dataclass
class GatePolicy:
    kind: GateKind | str = GateKind.ENTROPY
    swap_ratio: float = 0.5
    pass_index: int = 0
    total_passes: int = 1

    def __post_init__(self):
        self.kind = GateKind(self.kind)
        if not 0.0 <= self.swap_ratio <= 1.0:
            raise ValueError("swap_ratio must be in [0, 1]")
        if self.kind is GateKind.DYNAMIC and not 0 <= self.pass_index < self.total_passes:
            raise ValueError("need 0 <= pass_index < total_passes for the dynamic policy")


@dataclass
class GateDecision:
    swap_out: list[tuple[int, int]]  # (slot_index, sample_id), lowest scores first
    scores: dict[int, float] = field(default_factory=dict)


def score_entropy(inputs: ScoreInputs, num_classes: int) -> float:
    """Relative keep-worthiness in [0, 1].

    Correct predictions score by normalized entropy H/U (confidently right
    ones toward 0 — prime swap candidates); incorrect ones by (U - H)/U
    (confidently wrong ones toward 1 — keep for more training).
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    p = np.asarray(inputs.class_probs, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > PROB_TOLERANCE:
        raise DegenerateDistribution(f"bad probability vector (sum={p.sum():.9f})")
    p = np.clip(p, _CLAMP, 1.0)
    h = float(-(p * np.log(p)).sum())
    u = math.log(num_classes)
    if inputs.predicted_label == inputs.true_label:
        score = h / u
    else:
        score = (u - h) / u
    return min(max(score, 0.0), 1.0)


def swap_count(ratio: float, batch_size: int) -> int:
    """round-half-to-even of ratio*batch, clamped to [0, batch]."""
    return min(max(round(ratio * batch_size), 0), batch_size)


def gate_select(batch: list[ScoreInputs], policy: GatePolicy, rng) -> GateDecision:
    """Score a drawn mini-batch and pick the swap-out subset.

    Random assigns 0 to a uniformly chosen ratio-sized subset and 1 to the
    rest; Entropy scores every sample; Dynamic plays Random for the first
    ceil(total/2) passes of a bundle and Entropy after. Ties in score break
    by ascending sample id.
    """
    if not batch:
        raise EmptyBatch("gate_select needs a nonempty batch")
    kind = policy.kind
    if kind is GateKind.DYNAMIC:
        kind = GateKind.RANDOM if policy.pass_index < math.ceil(policy.total_passes / 2) else GateKind.ENTROPY

    n = len(batch)
    k = swap_count(policy.swap_ratio, n)
    if kind is GateKind.RANDOM:
        gen = as_generator(rng)
        picked = set(gen.choice(n, size=k, replace=False).tolist()) if k else set()
        scores = {s.sample_id: (0.0 if i in picked else 1.0) for i, s in enumerate(batch)}
    else:
        scores = {s.sample_id: score_entropy(s, len(s.class_probs)) for s in batch}

    ranked = sorted(batch, key=lambda s: (scores[s.sample_id], s.sample_id))
    return GateDecision(swap_out=[(s.slot_index, s.sample_id) for s in ranked[:k]], scores=scores)
