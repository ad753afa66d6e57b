"""Fast invariant checks on built-in synthetic fixtures (``fsdakit selftest``)."""

from __future__ import annotations

import json
import math
import tempfile
import time
from typing import Callable

import numpy as np

from . import verify
from .balance import BalanceConfig, balance_with_report, compute_stats
from .batches import TARGET, compose_schedule
from .dataset import BBox, annotations_equivalent, load_dataset, save_dataset
from .features import FeatureMap, GroundTruth, MultiLevelFeatures, pool_instances, upsample_level
from .losses import ClassifierHead, classification_loss, dissimilarity_loss, similarity_loss
from .metrics import Detection, gt_from_dataset, iou, map_suite
from .synthetic import synthetic_dataset, synthetic_target


def _check_balance():
    src = synthetic_dataset([40, 6, 3], 60, dense_images=3, dense_count=7, seed=3, prefix="s")
    tgt = synthetic_target(3, 3, seed=4)
    out, report = balance_with_report(src, tgt, BalanceConfig(threads=1))
    again, _ = balance_with_report(src, tgt, BalanceConfig(threads=3))
    stats = compute_stats(src)
    assert len(out) == len(src), "cardinality"
    assert min(out.class_counts()) >= 0.9 * max(src.class_counts()), "balance"
    assert all(verify.pasted_overlap_pixels(img) == 0 for img in out.images), "zero overlap"
    assert all(out.image(i) == src.image(i) for i in stats.dense_images), "dense images untouched"
    assert all(a == b for a, b in zip(out.images, again.images)), "thread determinism"
    return f"after={report['after']}"


def _check_roundtrip():
    ds = synthetic_dataset([3, 2], 4, seed=5, width=40, height=32)
    with tempfile.TemporaryDirectory() as tmp:
        back = load_dataset(save_dataset(ds, tmp))
    assert annotations_equivalent(ds, back), "save/load round trip"
    return "ok"


def _check_gradients():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(5):
        labels = np.repeat(np.arange(3), rng.integers(2, 5, size=3))
        x = rng.normal(size=(len(labels), 8))
        head = ClassifierHead(rng.normal(size=(3, 8)), rng.normal(size=3))
        checks = [
            (lambda v: similarity_loss(v, labels).value, similarity_loss(x, labels).grad),
            (lambda v: classification_loss(v, labels, head).value, classification_loss(x, labels, head).grad),
        ]
        cos = verify.class_mean_cosines(x, labels)
        if min(abs(c - 0.0) for c in cos) > 1e-3:
            checks.append((lambda v: dissimilarity_loss(v, labels, 0.0).value, dissimilarity_loss(x, labels, 0.0).grad))
        for f, g in checks:
            worst = max(worst, verify.relative_error(g, verify.numeric_gradient(f, x)))
    assert worst < 1e-5, f"gradient relative error {worst:.2e}"
    return f"max rel err {worst:.1e}"


def _check_loss_identities():
    rng = np.random.default_rng(12)
    v = rng.normal(size=(2, 6))
    x = np.repeat(v, 3, axis=0)
    labels = np.repeat([0, 1], 3)
    assert similarity_loss(x, labels).value == 0.0, "identical vectors"
    head = ClassifierHead.zeros(4, 6)
    y4 = np.arange(4).repeat(2)
    val = classification_loss(rng.normal(size=(8, 6)), y4, head).value
    assert abs(val - 4 * math.log(4)) < 1e-9, "uniform softmax"
    return "ok"


def _check_pooling():
    fm = FeatureMap(np.full((3, 5, 7), 2.25, dtype=np.float32))
    assert np.all(upsample_level(fm, 16).values == 2.25), "constant upsample"
    rec = MultiLevelFeatures("r", 64, 48, (fm, fm, fm), (GroundTruth(0, BBox(1, 2, 30, 40)), GroundTruth(1, BBox(0, 0, 64, 48))))
    inst = pool_instances(rec, 16)
    assert len(inst) == 6 and all(np.allclose(i.vector, 2.25) for i in inst), "pool constant"
    return "ok"


def _check_metrics():
    assert abs(iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) - 1 / 3) < 1e-12, "iou"
    ds = synthetic_dataset([4, 3], 5, seed=6, width=48, height=48)
    dets = [Detection(img.image_id, a.class_id, a.bbox, 0.9) for img in ds.images for a in img.annotations]
    rep = map_suite(dets, gt_from_dataset(ds), ds.num_classes)
    assert rep["mAP@50"] == 1.0 and rep["mAP@50:95"] == 1.0 and rep["recall"] == 1.0, "perfect detections"
    return "ok"


def _check_schedule():
    src = synthetic_dataset([4, 2], 6, seed=7, width=32, height=32)
    tgt = synthetic_target(2, 2, width=32, height=32)
    sched = compose_schedule(src, src, tgt, 4, 200, seed=1)
    assert all(sum(1 for t, _ in b if t == TARGET) == 1 for b in sched.batches), "one target per batch"
    assert sched.to_jsonl() == compose_schedule(src, src, tgt, 4, 200, seed=1).to_jsonl(), "determinism"
    return "ok"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("dataset_roundtrip", _check_roundtrip),
    ("balance_invariants", _check_balance),
    ("loss_gradients", _check_gradients),
    ("loss_identities", _check_loss_identities),
    ("pooling", _check_pooling),
    ("metrics", _check_metrics),
    ("batch_schedule", _check_schedule),
]


def run_selftest(stream) -> int:
    failed = 0
    for name, check in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = check()
            ok = True
        except Exception as exc:  # report and keep going
            detail = f"{type(exc).__name__}: {exc}"
            ok = False
        failed += not ok
        stream.write(
            json.dumps({"check": name, "pass": ok, "detail": detail, "seconds": round(time.perf_counter() - t0, 3)})
            + "\n"
        )
    stream.write(json.dumps({"summary": {"checks": len(CHECKS), "failed": failed}}) + "\n")
    return 1 if failed else 0
