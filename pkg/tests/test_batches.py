import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import one_class_per_image
from fsdakit.batches import AUGMENTED, SOURCE, TARGET, ScheduleError, compose_schedule
from fsdakit.synthetic import synthetic_target


@pytest.fixture(scope="module")
def pools():
    src = one_class_per_image(3, 10, seed=1)
    aug = one_class_per_image(3, 12, seed=2)
    tgt = synthetic_target(3, 4, width=32, height=32)
    return src, aug, tgt


def test_one_target_per_batch(pools):
    sched = compose_schedule(*pools, batch_size=4, epoch_len=100, seed=0)
    assert len(sched) == 100
    assert all(len(b) == 4 for b in sched.batches)
    assert all(sum(t == TARGET for t, _ in b) == 1 for b in sched.batches)


def test_deterministic(pools):
    a = compose_schedule(*pools, epoch_len=50, seed=3).to_jsonl()
    assert a == compose_schedule(*pools, epoch_len=50, seed=3).to_jsonl()
    assert a != compose_schedule(*pools, epoch_len=50, seed=4).to_jsonl()


def test_batch_size_one_rejected(pools):
    with pytest.raises(ScheduleError):
        compose_schedule(*pools, batch_size=1)


def test_empty_pool_rejected(pools):
    src, aug, tgt = pools
    with pytest.raises(ScheduleError):
        compose_schedule(src.subset([]), aug, tgt)


def test_ids_come_from_their_pools(pools):
    src, aug, tgt = pools
    sched = compose_schedule(*pools, epoch_len=200, seed=5)
    ids = {TARGET: set(tgt.image_ids), SOURCE: set(src.image_ids), AUGMENTED: set(aug.image_ids)}
    assert all(i in ids[t] for b in sched.batches for t, i in b)


@given(st.integers(0, 10**6), st.integers(2, 6))
@settings(max_examples=25, deadline=None)
def test_each_pool_covered_once_it_gets_enough_draws(seed, batch_size):
    src = one_class_per_image(2, 4, seed=1)
    aug = one_class_per_image(2, 7, seed=2)
    tgt = synthetic_target(2, 2, width=32, height=32)
    sched = compose_schedule(src, aug, tgt, batch_size=batch_size, epoch_len=40, seed=seed)
    for tag, ds in ((SOURCE, src), (AUGMENTED, aug)):
        drawn = [i for b in sched.batches for t, i in b if t == tag]
        if len(drawn) >= len(ds):
            assert set(drawn) == set(ds.image_ids)
            # no repeats before the pool is exhausted
            assert len(set(drawn[: len(ds)])) == len(ds)


def test_metadata_reports_nominal_mix(pools):
    meta = compose_schedule(*pools, epoch_len=10).metadata
    assert meta["nominal_mix_percent"] == {TARGET: 2.0, SOURCE: 30.0, AUGMENTED: 68.0}
    assert meta["non_target_probabilities"][SOURCE] == pytest.approx(30 / 98)
    assert meta["target_share_of_slots"] == 0.25


def test_default_epoch_covers_both_pools(pools):
    src, aug, _ = pools
    sched = compose_schedule(*pools, batch_size=4)
    assert len(sched) * 3 >= len(src) + len(aug)
