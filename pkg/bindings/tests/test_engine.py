import numpy as np
import pytest

from tieredreplay import InsufficientSamples, StorageArchive

from replay_engine import (
    DrawnSample,
    EngineClosed,
    EngineConfig,
    InvalidConfig,
    PathBusy,
    engine_close,
    engine_draw,
    engine_open,
    engine_push,
    engine_report,
)

DIM = 6


def config(root, **over):
    kw = dict(storage_root=str(root), dim=DIM, em_capacity=20, swap_ratio=0.5,
              swap_mode="sync", seed=3)
    kw.update(over)
    return EngineConfig(**kw)


def records(n, start=0, classes=4):
    rng = np.random.default_rng(start)
    return [
        (start + i, (start + i) % classes, 0, rng.standard_normal(DIM).astype(np.float32))
        for i in range(n)
    ]


def uniform_probs(n, classes=4):
    return np.full((n, classes), 1.0 / classes)


class TestLifecycle:
    def test_push_close_reopen_persists_storage(self, tmp_path):
        root = tmp_path / "e"
        h = engine_open(config(root))
        engine_push(h, records(100))
        live_before = h.stats()["storage_live"]
        assert live_before == 80  # capacity 20 of 100 stay in memory
        engine_close(h)

        h2 = engine_open(config(root))
        assert h2.stats()["storage_live"] == live_before
        engine_close(h2)

    def test_double_close_is_idempotent(self, tmp_path):
        h = engine_open(config(tmp_path / "d"))
        engine_close(h)
        engine_close(h)

    def test_second_open_on_same_root_is_busy(self, tmp_path):
        root = tmp_path / "busy"
        h = engine_open(config(root))
        with pytest.raises(PathBusy):
            engine_open(config(root))
        engine_close(h)
        h2 = engine_open(config(root))  # lock freed on close
        engine_close(h2)

    def test_calls_after_close_fail_cleanly(self, tmp_path):
        h = engine_open(config(tmp_path / "c"))
        engine_close(h)
        with pytest.raises(EngineClosed):
            engine_push(h, records(1))
        with pytest.raises(EngineClosed):
            engine_draw(h, 1)
        with pytest.raises(EngineClosed):
            h.stats()

    def test_invalid_config(self, tmp_path):
        with pytest.raises(InvalidConfig):
            engine_open(config(tmp_path / "i", swap_ratio=2.0))
        with pytest.raises(InvalidConfig):
            engine_open(config(tmp_path / "i2", dim=0))

    def test_context_manager(self, tmp_path):
        with engine_open(config(tmp_path / "cm")) as h:
            engine_push(h, records(5))
        with pytest.raises(EngineClosed):
            engine_draw(h, 1)


class TestDataPath:
    def test_push_then_draw(self, tmp_path):
        with engine_open(config(tmp_path / "pd")) as h:
            engine_push(h, records(100))
            drawn = engine_draw(h, 10)
            assert len(drawn) == 10
            assert all(isinstance(d, DrawnSample) for d in drawn)
            assert all(0 <= d.slot < 20 for d in drawn)
            assert all(d.features.dtype == np.float32 and len(d.features) == DIM for d in drawn)

    def test_draw_returns_copies(self, tmp_path):
        with engine_open(config(tmp_path / "cp")) as h:
            engine_push(h, records(30))
            d = engine_draw(h, 1)[0]
            d.features[:] = 123.0
            again = [x for x in engine_draw(h, 20) if x.slot == d.slot]
            assert again and not np.allclose(again[0].features, 123.0)

    def test_report_cardinality(self, tmp_path):
        # ratio 0.5 on 10 drawn slots -> 5 swap-outs
        with engine_open(config(tmp_path / "rc")) as h:
            engine_push(h, records(100))
            drawn = engine_draw(h, 10)
            count = engine_report(h, [d.slot for d in drawn], [True] * 10, uniform_probs(10))
            assert count == 5

    def test_report_before_push(self, tmp_path):
        with engine_open(config(tmp_path / "rb")) as h:
            with pytest.raises(InsufficientSamples):
                engine_report(h, [], [], np.zeros((0, 4)))

    def test_report_swaps_same_class(self, tmp_path):
        with engine_open(config(tmp_path / "sc", swap_ratio=1.0)) as h:
            engine_push(h, records(100))
            before = {d.slot: d.label for d in engine_draw(h, 10)}
            slots = list(before)
            engine_report(h, slots, [True] * 10, uniform_probs(10))
            h.drain()
            after = {d.slot: d.label for d in engine_draw(h, 20) if d.slot in before}
            assert all(after[s] == before[s] for s in after)

    def test_push_rejects_wrong_dim(self, tmp_path):
        with engine_open(config(tmp_path / "wd")) as h:
            with pytest.raises(InvalidConfig):
                engine_push(h, [(1, 0, 0, np.zeros(DIM + 1, dtype=np.float32))])

    def test_push_accepts_dicts(self, tmp_path):
        with engine_open(config(tmp_path / "dd")) as h:
            engine_push(h, [{"id": 7, "label": 1, "features": np.zeros(DIM, dtype=np.float32)}])
            assert h.stats()["memory_occupancy"] == 1


class TestAcceptanceRoundTrip:
    def test_push_draw_report_drain_accounting(self, tmp_path):
        # 1,000 pushed samples; 100 iterations of draw(100)/report at ratio
        # 0.5 must hand exactly 50 samples per iteration to the swap worker;
        # after close, the reopened archive agrees with the engine's counts
        root = tmp_path / "accept"
        h = engine_open(config(root, em_capacity=200, swap_ratio=0.5))
        engine_push(h, records(1000))

        total = 0
        for _ in range(100):
            drawn = engine_draw(h, 100)
            correctness = [True] * len(drawn)
            total += engine_report(h, [d.slot for d in drawn], correctness, uniform_probs(len(drawn)))
        stats = h.drain()
        assert total == 50 * 100
        assert stats["replacements_applied"] + stats["replacements_skipped"] + stats["failed_reads"] == total

        final = h.stats()
        engine_close(h)
        reopened = StorageArchive.open(root)
        assert reopened.live_count == final["storage_live"]
        assert len(reopened.live_ids() & {s.id for s in filter(None, h.em.slots)}) == 0
        reopened.close()
