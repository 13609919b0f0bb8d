import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tieredreplay import (
    DegenerateDistribution,
    EmptyBatch,
    GatePolicy,
    ScoreInputs,
    gate_select,
    score_entropy,
    swap_count,
)


def si(sid, probs, correct=True, slot=None):
    probs = np.asarray(probs, dtype=float)
    pred = int(np.argmax(probs))
    true = pred if correct else (pred + 1) % len(probs)
    return ScoreInputs(sample_id=sid, slot_index=slot if slot is not None else sid,
                       predicted_label=pred, true_label=true, class_probs=probs)


def binary_probs_for_score(target: float) -> tuple[float, float]:
    """Invert s = H(p)/ln2 for a correct two-class prediction by bisection."""
    want_h = target * math.log(2)

    def h(p):
        q = 1 - p
        return -(p * math.log(p) + q * math.log(q))

    lo, hi = 0.5, 1 - 1e-15  # H decreases from ln2 to 0 on [0.5, 1)
    for _ in range(200):
        mid = (lo + hi) / 2
        if h(mid) > want_h:
            lo = mid
        else:
            hi = mid
    return lo, 1 - lo


class TestScoreEntropy:
    def test_correct_uniform_is_one(self):
        s = score_entropy(si(1, [0.1] * 10, correct=True), 10)
        assert abs(s - 1.0) < 1e-12

    def test_correct_onehot_is_zero(self):
        s = score_entropy(si(1, [1.0, 0.0, 0.0], correct=True), 3)
        assert abs(s) < 1e-9

    def test_incorrect_onehot_is_one(self):
        s = score_entropy(si(1, [1.0, 0.0, 0.0], correct=False), 3)
        assert abs(s - 1.0) < 1e-9

    def test_two_class_numeric_value(self):
        # independent recomputation of the normalized-entropy formula
        h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        expected = h / math.log(2)
        s = score_entropy(si(1, [0.9, 0.1], correct=True), 2)
        assert abs(s - expected) < 1e-12
        assert abs(s - 0.46900) < 1e-4

    def test_rejects_negative_probability(self):
        with pytest.raises(DegenerateDistribution):
            score_entropy(si(1, [1.2, -0.2]), 2)

    def test_rejects_bad_sum(self):
        with pytest.raises(DegenerateDistribution):
            score_entropy(si(1, [0.6, 0.6]), 2)

    def test_relabeling_invariance(self):
        # score depends on probs only through H: permuting non-predicted,
        # non-true entries changes nothing
        a = ScoreInputs(1, 0, predicted_label=0, true_label=0, class_probs=[0.7, 0.1, 0.15, 0.05])
        b = ScoreInputs(1, 0, predicted_label=0, true_label=0, class_probs=[0.7, 0.15, 0.05, 0.1])
        assert score_entropy(a, 4) == pytest.approx(score_entropy(b, 4), abs=1e-12)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.booleans())
    @settings(max_examples=120, deadline=None)
    def test_score_bounds(self, raw, correct):
        probs = np.asarray(raw) / np.sum(raw)
        s = score_entropy(si(1, probs, correct=correct), len(probs))
        assert 0.0 <= s <= 1.0


class TestSwapCount:
    def test_round_half_even(self):
        assert swap_count(0.5, 5) == 2  # 2.5 rounds to even
        assert swap_count(0.5, 7) == 4  # 3.5 rounds to even
        assert swap_count(0.5, 10) == 5

    def test_clamped(self):
        assert swap_count(0.0, 10) == 0
        assert swap_count(1.0, 10) == 10


class TestGateSelect:
    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            gate_select([], GatePolicy(kind="random", swap_ratio=0.5), rng=0)

    def test_sort_and_take_lowest_scores(self):
        # spec example scores {a:0.1, b:0.4, c:0.6, d:0.9}, r=0.5 -> {a, b};
        # prob vectors constructed by inverting the binary entropy curve
        targets = {1: 0.1, 2: 0.4, 3: 0.6, 4: 0.9}
        batch = [si(sid, binary_probs_for_score(t), correct=True) for sid, t in targets.items()]
        decision = gate_select(batch, GatePolicy(kind="entropy", swap_ratio=0.5), rng=0)
        assert {sid for _, sid in decision.swap_out} == {1, 2}
        for sid, target in targets.items():
            assert decision.scores[sid] == pytest.approx(target, abs=1e-9)

    def test_ratio_zero_empty(self):
        batch = [si(i, [0.5, 0.5]) for i in range(4)]
        for kind in ("random", "entropy"):
            assert gate_select(batch, GatePolicy(kind=kind, swap_ratio=0.0), rng=0).swap_out == []

    def test_ratio_one_everything(self):
        batch = [si(i, [0.5, 0.5]) for i in range(4)]
        for kind in ("random", "entropy"):
            out = gate_select(batch, GatePolicy(kind=kind, swap_ratio=1.0), rng=0).swap_out
            assert {sid for _, sid in out} == {0, 1, 2, 3}

    def test_cardinality_exact(self):
        rng = np.random.default_rng(0)
        for n in (1, 3, 10, 33):
            batch = [si(i, [0.5, 0.5]) for i in range(n)]
            for r in (0.0, 0.2, 0.5, 0.8, 1.0):
                for kind in ("random", "entropy"):
                    got = gate_select(batch, GatePolicy(kind=kind, swap_ratio=r), rng=rng)
                    assert len(got.swap_out) == swap_count(r, n)

    def test_random_scores_are_zero_one(self):
        batch = [si(i, [0.6, 0.4]) for i in range(10)]
        d = gate_select(batch, GatePolicy(kind="random", swap_ratio=0.5), rng=3)
        assert set(d.scores.values()) == {0.0, 1.0}
        assert sum(1 for v in d.scores.values() if v == 0.0) == 5
        assert {sid for _, sid in d.swap_out} == {sid for sid, v in d.scores.items() if v == 0.0}

    def test_rank_consistency_entropy(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            batch = []
            for i in range(n):
                raw = rng.uniform(0.05, 1.0, size=4)
                batch.append(si(i, raw / raw.sum(), correct=bool(rng.integers(0, 2))))
            d = gate_select(batch, GatePolicy(kind="entropy", swap_ratio=0.5), rng=rng)
            out = {sid for _, sid in d.swap_out}
            kept = {s.sample_id for s in batch} - out
            for o in out:
                for k in kept:
                    assert (d.scores[k], k) >= (d.scores[o], o)

    def test_tie_break_by_ascending_id(self):
        batch = [si(sid, [0.5, 0.5]) for sid in (42, 7, 19)]
        d = gate_select(batch, GatePolicy(kind="entropy", swap_ratio=2 / 3), rng=0)
        assert [sid for _, sid in d.swap_out] == [7, 19]

    def test_dynamic_half_split(self):
        # passes 0,1 of 4 behave as Random (0/1 scores); 2,3 as Entropy
        probs = [0.9, 0.1]
        batch = [si(i, probs, correct=True) for i in range(4)]
        entropy_score = score_entropy(batch[0], 2)
        for p in range(4):
            pol = GatePolicy(kind="dynamic", swap_ratio=0.5, pass_index=p, total_passes=4)
            d = gate_select(batch, pol, rng=p)
            if p < 2:
                assert set(d.scores.values()) <= {0.0, 1.0}
            else:
                assert all(abs(v - entropy_score) < 1e-12 for v in d.scores.values())

    def test_dynamic_odd_budget_gives_extra_pass_to_random(self):
        batch = [si(i, [0.9, 0.1], correct=True) for i in range(4)]
        pol = GatePolicy(kind="dynamic", swap_ratio=0.5, pass_index=1, total_passes=3)
        d = gate_select(batch, pol, rng=0)
        assert set(d.scores.values()) <= {0.0, 1.0}  # ceil(3/2)=2 passes of Random
        pol2 = GatePolicy(kind="dynamic", swap_ratio=0.5, pass_index=2, total_passes=3)
        d2 = gate_select(batch, pol2, rng=0)
        assert all(v == pytest.approx(0.46900, abs=1e-4) for v in d2.scores.values())

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            GatePolicy(kind="entropy", swap_ratio=1.5)
        with pytest.raises(ValueError):
            GatePolicy(kind="dynamic", swap_ratio=0.5, pass_index=4, total_passes=4)
