import numpy as np
import pytest

from Models.state import Checkpoint
from Services.checkpoint import CheckpointStore
from Services.errors import MissingCheckpointError


def _checkpoint(k, shape=(4, 3), with_speed=True):
    rng = np.random.default_rng(k)
    return Checkpoint(
        index=k,
        time=0.1 * k,
        T=rng.standard_normal(shape),
        u=rng.standard_normal(shape),
        v=rng.standard_normal((shape[0], shape[1] + 1)),
        p=rng.standard_normal(shape),
        phi=rng.standard_normal(shape),
        speed=rng.standard_normal(shape) if with_speed and k > 0 else None,
    )


def test_in_memory_store():
    store = CheckpointStore()
    for k in range(3):
        store.append(_checkpoint(k))
    assert len(store) == 3
    assert store.spilled == 0
    assert store[-1].index == 2
    assert store.time_of(1) == pytest.approx(0.1)


def test_out_of_order_append():
    store = CheckpointStore()
    store.append(_checkpoint(0))
    with pytest.raises(ValueError):
        store.append(_checkpoint(2))


def test_missing_index():
    store = CheckpointStore()
    store.append(_checkpoint(0))
    with pytest.raises(MissingCheckpointError) as info:
        store[5]
    assert info.value.index == 5


def test_budget_spills_to_disk(tmp_path):
    one = _checkpoint(1).nbytes()
    store = CheckpointStore(budget_mb=1.5 * one / (1024 * 1024), spill_dir=tmp_path)
    originals = [_checkpoint(k) for k in range(4)]
    for cp in originals:
        store.append(cp)
    assert store.spilled == 3
    for cp in originals:
        loaded = store[cp.index]
        np.testing.assert_array_equal(loaded.T, cp.T)
        np.testing.assert_array_equal(loaded.v, cp.v)
        assert loaded.time == pytest.approx(cp.time)
        if cp.speed is None:
            assert loaded.speed is None
        else:
            np.testing.assert_array_equal(loaded.speed, cp.speed)


def test_close_removes_spill_files(tmp_path):
    with CheckpointStore(budget_mb=0.0, spill_dir=tmp_path) as store:
        store.append(_checkpoint(0))
        store.append(_checkpoint(1))
        assert any(tmp_path.rglob("*.npz"))
    assert not any(tmp_path.rglob("*.npz"))
    with pytest.raises(MissingCheckpointError):
        store[1]
