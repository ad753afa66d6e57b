"""Class-balancing cut-paste.

Rare-class objects from the source set are copied, visually augmented and
pasted into free areas of the sparsely populated source images; every such
image also receives one augmented cell cut from the few-shot target set.
Densely populated images pass through untouched, so the output has as many
images as the source.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .dataset import (
    Annotation,
    BBox,
    DetectionDataset,
    Domain,
    ImageRecord,
    SourceFlag,
)

log = logging.getLogger(__name__)

DEFAULT_R = 6
DEFAULT_BETA = 0.9
DEFAULT_CAP = 4
DEFAULT_STRIDE = 8
DEFAULT_MAX_TRIES = 32


class BalanceError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class PlanError(BalanceError):
    pass


class PlacementError(BalanceError):
    pass


@dataclass(frozen=True)
class ClassStats:
    per_class_count: dict[int, int]
    sparse_images: list[str]
    dense_images: list[str]
    class_presence: dict[int, list[str]]
    # every (image_id, annotation index) of each class, in dataset order
    instances: dict[int, list[tuple[str, int]]]
    r: int

    @property
    def max_count(self) -> int:
        return max(self.per_class_count.values(), default=0)


@dataclass(frozen=True)
class PlanRow:
    class_id: int
    receiving_image_id: str
    donor_image_id: str
    donor_annotation_index: int
    copies: int


@dataclass(frozen=True)
class IncrementPlan:
    total_increments: dict[int, int]
    assignments: tuple[PlanRow, ...]
    beta: float = DEFAULT_BETA
    cap_per_image: int = DEFAULT_CAP

    def rows_for(self, image_id: str) -> list[PlanRow]:
        return [row for row in self.assignments if row.receiving_image_id == image_id]

    def by_receiver(self) -> dict[str, list[PlanRow]]:
        out: dict[str, list[PlanRow]] = defaultdict(list)
        for row in self.assignments:
            out[row.receiving_image_id].append(row)
        return dict(out)

    @property
    def is_empty(self) -> bool:
        return not self.assignments


@dataclass
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) uint8

    def count(self) -> int:
        return int(self.bits.sum())

    def mark(self, box: BBox) -> None:
        c0, r0, c1, r1 = box.pixel_span()
        self.bits[max(r0, 0) : min(r1, self.height), max(c0, 0) : min(c1, self.width)] = 1

    def is_free(self, box: BBox) -> bool:
        c0, r0, c1, r1 = box.pixel_span()
        return not self.bits[max(r0, 0) : r1, max(c0, 0) : c1].any()


@dataclass(frozen=True)
class AugmentParams:
    intensity_scale_range: tuple[float, float] = (0.8, 1.2)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.intensity_scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"intensity_scale_range must satisfy 0 < low <= high, got {self.intensity_scale_range}")
        lo, hi = self.blur_sigma_range
        # a zero lower bound is allowed: sigma 0 means "no blur"
        if not 0 <= lo <= hi:
            raise ValueError(f"blur_sigma_range must satisfy 0 <= low <= high, got {self.blur_sigma_range}")
        object.__setattr__(self, "intensity_scale_range", tuple(map(float, self.intensity_scale_range)))
        object.__setattr__(self, "blur_sigma_range", tuple(map(float, self.blur_sigma_range)))


@dataclass(frozen=True)
class BalanceConfig:
    r: int = DEFAULT_R
    beta: float = DEFAULT_BETA
    cap_per_image: int = DEFAULT_CAP
    stride: int = DEFAULT_STRIDE
    max_tries: int = DEFAULT_MAX_TRIES
    augment: AugmentParams = field(default_factory=AugmentParams)
    augment_target_cell: bool = True
    threads: int = 1

    @property
    def seed(self) -> int:
        return self.augment.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["intensity_scale_range"] = list(self.augment.intensity_scale_range)
        d["augment"]["blur_sigma_range"] = list(self.augment.blur_sigma_range)
        return d


# ---------------------------------------------------------------------------
# statistics and plan
# ---------------------------------------------------------------------------


def compute_stats(source: DetectionDataset, r: int = DEFAULT_R) -> ClassStats:
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if len(source) == 0:
        raise BalanceError("cannot compute statistics of an empty dataset")
    counts = {c: 0 for c in range(source.num_classes)}
    presence: dict[int, list[str]] = {c: [] for c in range(source.num_classes)}
    instances: dict[int, list[tuple[str, int]]] = {c: [] for c in range(source.num_classes)}
    sparse, dense = [], []
    for img in source.images:
        (sparse if len(img.annotations) < r else dense).append(img.image_id)
        seen = set()
        for idx, ann in enumerate(img.annotations):
            counts[ann.class_id] += 1
            instances[ann.class_id].append((img.image_id, idx))
            if ann.class_id not in seen:
                seen.add(ann.class_id)
                presence[ann.class_id].append(img.image_id)
    return ClassStats(counts, sparse, dense, presence, instances, r)


def balance_target(max_count: int, beta: float) -> int:
    # the epsilon absorbs float noise such as 0.9 * 100 -> 90.00000000000001
    return math.ceil(beta * max_count - 1e-9)


def compute_increment_plan(
    stats: ClassStats,
    seed: int,
    beta: float = DEFAULT_BETA,
    cap_per_image: int = DEFAULT_CAP,
) -> IncrementPlan:
    """Round-robin donors and receivers; at most ``cap_per_image`` copies per class per image.

    The seed only permutes the receiver and donor orders. Receivers are
    walked with one cursor shared across classes so successive classes start
    on different images.
    """
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if cap_per_image < 1:
        raise ValueError("cap_per_image must be >= 1")
    rng = np.random.default_rng(_seed_int(seed))
    max_count = stats.max_count
    goal = balance_target(max_count, beta)
    receivers = [stats.sparse_images[i] for i in rng.permutation(len(stats.sparse_images))]
    totals: dict[int, int] = {}
    rows: list[PlanRow] = []
    cursor = 0
    for cls in sorted(stats.per_class_count):
        count = stats.per_class_count[cls]
        deficit = goal - count if count < max_count else 0
        totals[cls] = max(deficit, 0)
        if deficit <= 0:
            continue
        donors = stats.instances.get(cls, [])
        if not donors:
            raise PlanError(f"class {cls} needs {deficit} increments but has no donor instance")
        if not receivers:
            raise PlanError("no sparse images available to receive pastes")
        if deficit > cap_per_image * len(receivers):
            raise PlanError(
                f"class {cls} needs {deficit} increments; {len(receivers)} sparse images x "
                f"cap {cap_per_image} allow only {cap_per_image * len(receivers)}"
            )
        per_row = min(cap_per_image, math.ceil(deficit / len(receivers)))
        donor_order = rng.permutation(len(donors))
        remaining = deficit
        d = 0
        while remaining > 0:
            copies = min(per_row, remaining)
            donor_id, donor_idx = donors[donor_order[d % len(donors)]]
            rows.append(PlanRow(cls, receivers[cursor % len(receivers)], donor_id, donor_idx, copies))
            cursor += 1
            d += 1
            remaining -= copies
    return IncrementPlan(totals, tuple(rows), beta, cap_per_image)


# ---------------------------------------------------------------------------
# per-image primitives
# ---------------------------------------------------------------------------


def build_object_mask(image: ImageRecord) -> BinaryMask:
    boxes = np.array([a.bbox.as_tuple() for a in image.annotations], dtype=np.float64).reshape(-1, 4)
    bits = kernels.fill_boxes(image.height, image.width, boxes)
    return BinaryMask(image.width, image.height, bits)


def find_empty_region(
    mask: BinaryMask,
    patch_w: int,
    patch_h: int,
    seed: int | None = None,
    *,
    stride: int = DEFAULT_STRIDE,
    rng: np.random.Generator | None = None,
) -> BBox | None:
    """Uniform pick among grid positions whose window holds no set bit."""
    if patch_w < 1 or patch_h < 1:
        raise ValueError("patch dimensions must be positive")
    if patch_w > mask.width or patch_h > mask.height:
        raise ValueError(f"patch {patch_w}x{patch_h} larger than image {mask.width}x{mask.height}")
    if rng is None:
        rng = np.random.default_rng(_seed_int(seed or 0))
    candidates = kernels.free_positions(mask.bits, patch_h, patch_w, stride)
    if len(candidates) == 0:
        return None
    y, x = candidates[int(rng.integers(len(candidates)))]
    return BBox(float(x), float(y), float(x + patch_w), float(y + patch_h))


def augment_patch(patch: np.ndarray, params: AugmentParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random intensity scaling, clamp to [0, 255], then Gaussian blur."""
    patch = np.asarray(patch)
    if patch.size == 0:
        raise ValueError("empty patch")
    if rng is None:
        rng = np.random.default_rng(_seed_int(params.seed))
    scale = rng.uniform(*params.intensity_scale_range)
    sigma = rng.uniform(*params.blur_sigma_range)
    scaled = np.clip(patch.astype(np.float64) * scale, 0.0, 255.0)
    blurred = kernels.gaussian_blur(scaled, float(sigma))
    return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)


def cut_patch(image: ImageRecord, box: BBox) -> np.ndarray:
    c0, r0, c1, r1 = box.pixel_span()
    return np.array(image.pixels[max(r0, 0) : min(r1, image.height), max(c0, 0) : min(c1, image.width)])


def _check_location(location: BBox, patch: np.ndarray, width: int, height: int):
    coords = location.as_tuple()
    if any(v != int(v) for v in coords):
        raise ValueError(f"paste location must be pixel aligned, got {coords}")
    if (int(location.height), int(location.width)) != patch.shape[:2]:
        raise ValueError(
            f"location {int(location.width)}x{int(location.height)} does not match "
            f"patch {patch.shape[1]}x{patch.shape[0]}"
        )
    if not location.within(width, height):
        raise ValueError(f"location {coords} outside {width}x{height}")


def paste_object(host: ImageRecord, patch: np.ndarray, location: BBox, class_id: int) -> ImageRecord:
    patch = np.asarray(patch, dtype=np.uint8)
    _check_location(location, patch, host.width, host.height)
    pixels = np.array(host.pixels)
    x0, y0, x1, y1 = (int(v) for v in location.as_tuple())
    pixels[y0:y1, x0:x1] = patch
    ann = Annotation(int(class_id), location, SourceFlag.PASTED)
    return ImageRecord(host.image_id, pixels, host.annotations + (ann,), host.domain)


class _Canvas:
    """Mutable working copy of one host image during balancing."""

    def __init__(self, host: ImageRecord):
        self.host = host
        self.pixels = np.array(host.pixels)
        self.annotations = list(host.annotations)
        self.mask = build_object_mask(host)

    def place(self, patch, class_id, rng, stride) -> BBox | None:
        h, w = patch.shape[:2]
        if w > self.mask.width or h > self.mask.height:
            return None
        loc = find_empty_region(self.mask, w, h, stride=stride, rng=rng)
        if loc is None:
            return None
        x0, y0, x1, y1 = (int(v) for v in loc.as_tuple())
        self.pixels[y0:y1, x0:x1] = patch
        self.annotations.append(Annotation(int(class_id), loc, SourceFlag.PASTED))
        self.mask.mark(loc)
        return loc

    def inject_target(self, target, params, rng, stride, max_tries, augment=True):
        annotated = [img for img in target.images if img.annotations]
        if not annotated:
            raise PlacementError("target dataset has no annotated image")
        for _ in range(max_tries):
            donor = annotated[int(rng.integers(len(annotated)))]
            ann = donor.annotations[int(rng.integers(len(donor.annotations)))]
            patch = cut_patch(donor, ann.bbox)
            if augment:
                patch = augment_patch(patch, params, rng=rng)
            if self.place(patch, ann.class_id, rng, stride) is not None:
                return ann.class_id
        raise PlacementError(
            f"image {self.host.image_id!r}: no empty region for a target cell after {max_tries} tries"
        )

    def result(self) -> ImageRecord:
        return ImageRecord(self.host.image_id, self.pixels, tuple(self.annotations), self.host.domain)


def inject_target_cell(
    host: ImageRecord,
    target: DetectionDataset,
    params: AugmentParams,
    *,
    stride: int = DEFAULT_STRIDE,
    max_tries: int = DEFAULT_MAX_TRIES,
    augment: bool = True,
    rng: np.random.Generator | None = None,
) -> ImageRecord:
    """Paste one random target-domain cell into a free region of ``host``.

    Raises :class:`PlacementError` when no donor cell fits; ``host`` itself is
    never modified.
    """
    if rng is None:
        rng = image_rng(params.seed, host.image_id)
    canvas = _Canvas(host)
    canvas.inject_target(target, params, rng, stride, max_tries, augment)
    return canvas.result()


# ---------------------------------------------------------------------------
# whole-dataset pipeline
# ---------------------------------------------------------------------------


def _seed_int(seed) -> int:
    return int(seed) % (1 << 63)


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    """Per-image stream: independent of processing order and thread count."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return np.random.default_rng([_seed_int(seed), int.from_bytes(digest[:8], "little")])


def _augment_one(host, rows, source, target, cfg: BalanceConfig):
    rng = image_rng(cfg.seed, host.image_id)
    canvas = _Canvas(host)
    placed: dict[int, int] = defaultdict(int)
    failures = []
    for row in rows:
        donor = source.image(row.donor_image_id)
        raw = cut_patch(donor, donor.annotations[row.donor_annotation_index].bbox)
        for copy in range(row.copies):
            patch = augment_patch(raw, cfg.augment, rng=rng)
            if canvas.place(patch, row.class_id, rng, cfg.stride) is None:
                failures.append(
                    {
                        "image_id": host.image_id,
                        "kind": "paste",
                        "class_id": row.class_id,
                        "missed_copies": row.copies - copy,
                    }
                )
                break
            placed[row.class_id] += 1
    target_class = None
    try:
        target_class = canvas.inject_target(
            target, cfg.augment, rng, cfg.stride, cfg.max_tries, cfg.augment_target_cell
        )
    except PlacementError as exc:
        failures.append({"image_id": host.image_id, "kind": "target_cell", "reason": str(exc)})
    return canvas.result(), dict(placed), target_class, failures


def balance_with_report(
    source: DetectionDataset,
    target: DetectionDataset,
    cfg: BalanceConfig = BalanceConfig(),
) -> tuple[DetectionDataset, dict]:
    if source.classes != target.classes:
        raise BalanceError("source and target datasets must share the class catalog")
    stats = compute_stats(source, cfg.r)
    plan = compute_increment_plan(stats, cfg.seed, cfg.beta, cfg.cap_per_image)
    by_receiver = plan.by_receiver()
    hosts = [source.image(i) for i in stats.sparse_images]

    def job(host):
        return _augment_one(host, by_receiver.get(host.image_id, []), source, target, cfg)

    if cfg.threads > 1 and len(hosts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(job, hosts))
    else:
        results = [job(h) for h in hosts]

    images = {img.image_id: img for img in source.images}
    placed = defaultdict(int)
    target_cells = defaultdict(int)
    failures = []
    for record, placed_here, target_class, fails in results:
        images[record.image_id] = record
        for cls, n in placed_here.items():
            placed[cls] += n
        if target_class is not None:
            target_cells[target_class] += 1
        failures.extend(fails)
    out = DetectionDataset(
        source.classes, tuple(images[k] for k in sorted(images)), Domain.AUGMENTED
    )

    before = [stats.per_class_count[c] for c in range(source.num_classes)]
    after = out.class_counts()
    max_before = max(before) if before else 0
    report = {
        # thread count never changes the result, so it is left out
        "config": {k: v for k, v in cfg.to_dict().items() if k != "threads"},
        "classes": list(source.classes),
        "num_images": {"source": len(source), "output": len(out)},
        "sparse_images": len(stats.sparse_images),
        "dense_images": len(stats.dense_images),
        "before": before,
        "after": after,
        "planned": [plan.total_increments.get(c, 0) for c in range(source.num_classes)],
        "placed": [placed.get(c, 0) for c in range(source.num_classes)],
        "target_cells": {
            "per_class": [target_cells.get(c, 0) for c in range(source.num_classes)],
            "placed": sum(target_cells.values()),
            "failed": sum(1 for f in failures if f["kind"] == "target_cell"),
        },
        "balance_ratio": (min(after) / max_before) if max_before else 1.0,
        "paste_at_original_size": True,
        "target_cell_augmented": cfg.augment_target_cell,
        "failures": failures,
    }
    if failures:
        log.warning(
            "%d placement failures (%d paste rows, %d target cells)",
            len(failures),
            sum(1 for f in failures if f["kind"] == "paste"),
            report["target_cells"]["failed"],
        )
    for cls, want in plan.total_increments.items():
        if want > 0 and placed.get(cls, 0) < 0.5 * want:
            raise BalanceError(
                f"class {source.classes[cls]!r} received {placed.get(cls, 0)} of {want} planned increments",
                report,
            )
    return out, report


def balance_dataset(
    source: DetectionDataset,
    target: DetectionDataset,
    r: int = DEFAULT_R,
    beta: float = DEFAULT_BETA,
    params: AugmentParams = AugmentParams(),
    **options,
) -> DetectionDataset:
    """Balanced copy of ``source``; see :func:`balance_with_report` for the report."""
    cfg = BalanceConfig(r=r, beta=beta, augment=params, **options)
    return balance_with_report(source, target, cfg)[0]
