import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import blank_image
from fsdakit import verify
from fsdakit.balance import (
    AugmentParams,
    BalanceConfig,
    BalanceError,
    BinaryMask,
    ClassStats,
    PlacementError,
    PlanError,
    augment_patch,
    balance_dataset,
    balance_with_report,
    build_object_mask,
    compute_increment_plan,
    compute_stats,
    find_empty_region,
    inject_target_cell,
    paste_object,
)
from fsdakit.dataset import Annotation, BBox, DetectionDataset, Domain, ImageRecord
from fsdakit.metrics import iou
from fsdakit.synthetic import synthetic_dataset, synthetic_target


def image_with_counts(counts, classes=3):
    images = []
    for i, n in enumerate(counts):
        boxes = [(j % classes, (2 + 12 * (j % 7), 2 + 12 * (j // 7), 10 + 12 * (j % 7), 10 + 12 * (j // 7))) for j in range(n)]
        images.append(blank_image(f"img{i + 1}", boxes=boxes))
    return DetectionDataset(tuple(f"c{k}" for k in range(classes)), tuple(images))


# -- statistics ------------------------------------------------------------------


def test_stats_partition_by_threshold():
    st_ = compute_stats(image_with_counts([2, 5, 9]), r=6)
    assert st_.sparse_images == ["img1", "img2"]
    assert st_.dense_images == ["img3"]


def test_stats_recount_matches_annotations():
    ds = synthetic_dataset([100, 10, 5], 120, dense_images=4, seed=1)
    want = Counter(a.class_id for img in ds.images for a in img.annotations)
    st_ = compute_stats(ds)
    assert st_.per_class_count == {c: want[c] for c in range(3)}
    assert set(st_.sparse_images) | set(st_.dense_images) == set(ds.image_ids)
    assert not set(st_.sparse_images) & set(st_.dense_images)
    for c, ids in st_.class_presence.items():
        assert all(any(a.class_id == c for a in ds.image(i).annotations) for i in ids)


def test_stats_absent_class():
    st_ = compute_stats(image_with_counts([1, 1], classes=3))
    assert st_.per_class_count[2] == 0 and st_.class_presence[2] == []


def test_stats_empty_dataset():
    with pytest.raises(BalanceError):
        compute_stats(DetectionDataset(("a",), ()))


# -- increment plan --------------------------------------------------------------


def test_plan_two_classes():
    ds = synthetic_dataset([100, 10], 80, seed=2)
    plan = compute_increment_plan(compute_stats(ds), seed=0)
    assert plan.total_increments == {0: 0, 1: 80}


def test_plan_totals_from_rows():
    ds = synthetic_dataset([100, 10, 5], 30, seed=3, width=160, height=160)
    st_ = compute_stats(ds)
    assert len(st_.sparse_images) == 30
    plan = compute_increment_plan(st_, seed=4)
    assert plan.total_increments == {0: 0, 1: 80, 2: 85}
    per_class = Counter()
    per_image_class = Counter()
    for row in plan.assignments:
        per_class[row.class_id] += row.copies
        per_image_class[row.class_id, row.receiving_image_id] += row.copies
        assert row.receiving_image_id in st_.sparse_images
        assert ds.image(row.donor_image_id).annotations[row.donor_annotation_index].class_id == row.class_id
    assert dict(per_class) == {1: 80, 2: 85}
    assert max(per_image_class.values()) <= 4


def test_plan_already_balanced_is_empty():
    plan = compute_increment_plan(compute_stats(synthetic_dataset([5, 5], 10, seed=1)), seed=0)
    assert plan.is_empty and not plan.assignments


def test_plan_without_donor_names_class():
    st_ = compute_stats(image_with_counts([3, 3], classes=4))
    with pytest.raises(PlanError, match="class 3"):
        compute_increment_plan(st_, seed=0)


def test_plan_is_seed_deterministic():
    st_ = compute_stats(synthetic_dataset([50, 7, 3], 40, seed=5))
    assert compute_increment_plan(st_, 9) == compute_increment_plan(st_, 9)


@given(st.lists(st.integers(1, 40), min_size=2, max_size=5), st.integers(10, 60), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_plan_meets_goal_for_every_class(counts, n_sparse, seed):
    sparse = [f"s{i}" for i in range(n_sparse)]
    instances = {c: [(sparse[j % n_sparse], j // n_sparse) for j in range(n)] for c, n in enumerate(counts)}
    stats = ClassStats(
        dict(enumerate(counts)),
        sparse,
        [],
        {c: sorted({i for i, _ in v}) for c, v in instances.items()},
        instances,
        6,
    )
    goal = math.ceil(0.9 * max(counts) - 1e-9)
    if any(goal - n > 4 * n_sparse for n in counts):
        with pytest.raises(PlanError):
            compute_increment_plan(stats, seed)
        return
    plan = compute_increment_plan(stats, seed)
    per_image = Counter()
    for c, n in enumerate(counts):
        want = max(goal - n, 0) if n < max(counts) else 0
        assert plan.total_increments[c] == want
        assert sum(r.copies for r in plan.assignments if r.class_id == c) == want
    for r in plan.assignments:
        per_image[r.class_id, r.receiving_image_id] += r.copies
        assert r.copies >= 1
    assert not per_image or max(per_image.values()) <= 4


# -- masks and empty regions -------------------------------------------------------


def test_mask_empty_image():
    assert build_object_mask(blank_image()).count() == 0


def test_mask_single_box_area():
    assert build_object_mask(blank_image(boxes=[(0, (10, 10, 20, 20))])).count() == 100


def test_mask_union_matches_pixel_oracle():
    img = blank_image(boxes=[(0, (10, 10, 30, 25)), (1, (20.5, 15.2, 41, 33.7))])
    want = verify.box_pixels((10, 10, 30, 25), 100, 100) | verify.box_pixels((20.5, 15.2, 41, 33.7), 100, 100)
    mask = build_object_mask(img)
    assert mask.count() == int(want.sum())
    assert np.array_equal(mask.bits.astype(bool), want)


def test_empty_region_on_clear_mask():
    mask = BinaryMask(50, 40, np.zeros((40, 50), np.uint8))
    box = find_empty_region(mask, 12, 9, seed=1)
    assert box is not None and box.within(50, 40)


def test_empty_region_full_mask():
    assert find_empty_region(BinaryMask(50, 40, np.ones((40, 50), np.uint8)), 5, 5, seed=1) is None


def test_empty_region_free_corner():
    bits = np.ones((100, 100), np.uint8)
    bits[:32, :32] = 0
    mask = BinaryMask(100, 100, bits)
    for seed in range(20):
        box = find_empty_region(mask, 20, 20, seed=seed)
        assert box.x_max <= 32 and box.y_max <= 32
        assert not (verify.box_pixels(box.as_tuple(), 100, 100) & bits.astype(bool)).any()


def test_empty_region_patch_too_large():
    with pytest.raises(ValueError):
        find_empty_region(BinaryMask(10, 10, np.zeros((10, 10), np.uint8)), 11, 3)


def test_empty_region_uniform_over_candidates():
    mask = BinaryMask(24, 8, np.zeros((8, 24), np.uint8))
    rng = np.random.default_rng(0)
    hits = Counter(find_empty_region(mask, 8, 8, rng=rng).x_min for _ in range(3000))
    assert set(hits) == {0.0, 8.0, 16.0}
    assert all(abs(v / 3000 - 1 / 3) < 0.04 for v in hits.values())


# -- augmentation and pasting --------------------------------------------------------


def test_augment_identity_parameters():
    patch = np.random.default_rng(0).integers(0, 256, (9, 7, 3), dtype=np.uint8)
    out = augment_patch(patch, AugmentParams((1.0, 1.0), (0.0, 0.0), seed=3))
    assert np.array_equal(out, patch)


@pytest.mark.parametrize("sigma", [0.3, 1.0, 1.5])
def test_augment_constant_stays_constant(sigma):
    patch = np.full((11, 6, 3), 120, np.uint8)
    out = augment_patch(patch, AugmentParams((0.9, 0.9), (sigma, sigma)))
    assert np.all(out == out[0, 0, 0])
    assert out[0, 0, 0] == 108


def test_augment_clamps():
    patch = np.full((3, 3, 3), 200, np.uint8)
    out = augment_patch(patch, AugmentParams((2.0, 2.0), (0.0, 0.0)))
    assert np.all(out == 255) and out.shape == patch.shape


def test_augment_deterministic():
    patch = np.random.default_rng(1).integers(0, 256, (10, 10, 3), dtype=np.uint8)
    params = AugmentParams(seed=5)
    assert np.array_equal(augment_patch(patch, params), augment_patch(patch, params))


@pytest.mark.parametrize("scale,blur", [((0.0, 1.0), (0, 1)), ((1.2, 1.0), (0, 1)), ((1, 1), (-0.1, 1))])
def test_augment_params_validated(scale, blur):
    with pytest.raises(ValueError):
        AugmentParams(scale, blur)


def test_paste_into_empty_image():
    host = blank_image(value=9)
    patch = np.full((5, 8, 3), 200, np.uint8)
    out = paste_object(host, patch, BBox(10, 20, 18, 25), 2)
    assert len(out.annotations) == 1 and out.annotations[0].pasted
    assert np.all(out.pixels[20:25, 10:18] == 200)
    outside = np.ones((100, 100), bool)
    outside[20:25, 10:18] = False
    assert np.all(out.pixels[outside] == 9)
    assert np.all(host.pixels == 9)


def test_paste_twice_disjoint_and_mask_consistent():
    host = blank_image()
    patch = np.zeros((10, 10, 3), np.uint8)
    out = paste_object(paste_object(host, patch, BBox(0, 0, 10, 10), 0), patch, BBox(20, 0, 30, 10), 1)
    a, b = out.annotations
    assert a.pasted and b.pasted and iou(a.bbox, b.bbox) == 0.0
    assert build_object_mask(out).count() == 200


def test_paste_dimension_mismatch():
    with pytest.raises(ValueError):
        paste_object(blank_image(), np.zeros((4, 4, 3), np.uint8), BBox(0, 0, 5, 4), 0)


def test_paste_keeps_existing_annotations():
    host = blank_image(boxes=[(1, (50, 50, 60, 60))])
    out = paste_object(host, np.zeros((4, 4, 3), np.uint8), BBox(0, 0, 4, 4), 0)
    assert out.annotations[0] == host.annotations[0]


# -- target cell injection ------------------------------------------------------------


def single_cell_target():
    img = blank_image("t0", width=40, height=40, boxes=[(2, (5, 5, 17, 15))], domain=Domain.TARGET, value=200)
    return DetectionDataset(("a", "b", "c"), (img,), Domain.TARGET)


def test_inject_single_cell():
    out = inject_target_cell(blank_image(), single_cell_target(), AugmentParams(seed=1))
    (ann,) = out.annotations
    assert ann.class_id == 2 and ann.pasted
    assert (ann.bbox.width, ann.bbox.height) == (12, 10)


def test_inject_into_covered_host_fails():
    host = blank_image(boxes=[(0, (0, 0, 100, 100))])
    with pytest.raises(PlacementError):
        inject_target_cell(host, single_cell_target(), AugmentParams(seed=1))
    assert len(host.annotations) == 1


def test_inject_deterministic(small_target):
    host = blank_image(value=50)
    a = inject_target_cell(host, small_target, AugmentParams(seed=4))
    b = inject_target_cell(host, small_target, AugmentParams(seed=4))
    assert a == b


# -- whole pipeline -------------------------------------------------------------------


@pytest.fixture(scope="module")
def balanced(small_source, small_target):
    return balance_with_report(small_source, small_target, BalanceConfig())


def test_balance_counts_and_cardinality(small_source, balanced):
    out, report = balanced
    assert len(out) == len(small_source)
    assert min(out.class_counts()) >= 0.9 * max(small_source.class_counts())
    assert report["before"] == small_source.class_counts()
    assert report["after"] == out.class_counts()
    assert out.domain is Domain.AUGMENTED


def test_balance_zero_overlap(balanced):
    out, _ = balanced
    assert all(verify.pasted_overlap_pixels(img) == 0 for img in out.images)
    for img in out.images:
        pasted = [a for a in img.annotations if a.pasted]
        for p in pasted:
            assert all(iou(p.bbox, o.bbox) == 0.0 for o in img.annotations if o is not p)


def test_balance_dense_untouched(small_source, balanced):
    out, _ = balanced
    for i in compute_stats(small_source).dense_images:
        assert out.image(i) == small_source.image(i)


def test_balance_pastes_match_operations(small_source, balanced):
    out, report = balanced
    sparse = compute_stats(small_source).sparse_images
    pasted_total = sum(a.pasted for img in out.images for a in img.annotations)
    assert pasted_total == sum(report["placed"]) + report["target_cells"]["placed"]
    assert report["target_cells"]["placed"] == len(sparse)
    for i in sparse:
        src, dst = small_source.image(i), out.image(i)
        assert dst.annotations[: len(src.annotations)] == src.annotations
        assert all(a.pasted for a in dst.annotations[len(src.annotations) :])


def test_balance_thread_count_invariant(small_source, small_target, balanced):
    out, report = balanced
    out3, report3 = balance_with_report(small_source, small_target, BalanceConfig(threads=3))
    assert out.image_ids == out3.image_ids
    assert all(a == b for a, b in zip(out.images, out3.images))
    assert report == report3


def test_balance_already_balanced_adds_one_cell_per_sparse_image():
    src = synthetic_dataset([6, 6, 6], 9, seed=11)
    tgt = synthetic_target(3, 2, seed=12)
    out = balance_dataset(src, tgt)
    assert sum(out.class_counts()) == sum(src.class_counts()) + len(src)


def test_balance_class_catalog_mismatch(small_source):
    with pytest.raises(BalanceError):
        balance_dataset(small_source, synthetic_target(2, 2))


def test_balance_fails_when_most_pastes_cannot_fit():
    # 32x32 sparse hosts crowded by one big box leave no room for the rare class
    big = [blank_image(f"h{i}", 32, 32, boxes=[(0, (0, 0, 30, 30))]) for i in range(30)]
    donor = blank_image("d", 32, 32, boxes=[(1, (0, 0, 20, 20))])
    src = DetectionDataset(("a", "b"), tuple(big) + (donor,))
    tgt = DetectionDataset(("a", "b"), (blank_image("t", 32, 32, boxes=[(1, (0, 0, 4, 4))], domain=Domain.TARGET),), Domain.TARGET)
    with pytest.raises(BalanceError) as exc:
        balance_with_report(src, tgt, BalanceConfig())
    assert exc.value.report["failures"]
