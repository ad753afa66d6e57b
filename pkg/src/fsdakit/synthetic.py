"""Deterministic synthetic microscopy-like datasets for tests and ``selftest``.

Cells are filled ellipses on a smooth background. Source and target images
differ in background tone and cell tint to mimic two microscopes.
"""

from __future__ import annotations

import numpy as np

from .dataset import Annotation, BBox, DetectionDataset, Domain, ImageRecord

_PALETTE = np.array(
    [
        [180, 60, 140],
        [90, 40, 170],
        [200, 120, 60],
        [60, 150, 90],
        [40, 90, 200],
        [150, 150, 40],
    ],
    dtype=np.float64,
)


def _background(rng, height, width, domain):
    base = np.array([235.0, 215.0, 220.0]) if domain is Domain.SOURCE else np.array([200.0, 205.0, 230.0])
    yy, xx = np.mgrid[0:height, 0:width]
    ramp = 10.0 * (xx / max(width - 1, 1) - 0.5) + 6.0 * (yy / max(height - 1, 1) - 0.5)
    img = base[None, None, :] + ramp[..., None] + rng.normal(0.0, 3.0, size=(height, width, 3))
    return img


def _draw_cell(img, box, color, rng):
    x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
    cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
    ry, rx = max((y1 - y0) / 2.0, 0.5), max((x1 - x0) / 2.0, 0.5)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    shade = color[None, :] + rng.normal(0.0, 6.0, size=(int(inside.sum()), 3))
    region = img[y0:y1, x0:x1]
    region[inside] = shade


def place_boxes(rng, width, height, count, size_range=(10, 18), occupied=(), max_tries=500):
    """Integer boxes that share no pixel with each other or with ``occupied``."""
    boxes = list(occupied)
    placed = []
    for _ in range(count):
        for _attempt in range(max_tries):
            bw = int(rng.integers(size_range[0], size_range[1] + 1))
            bh = int(rng.integers(size_range[0], size_range[1] + 1))
            if bw > width or bh > height:
                raise ValueError("cell size exceeds image size")
            x0 = int(rng.integers(0, width - bw + 1))
            y0 = int(rng.integers(0, height - bh + 1))
            cand = (x0, y0, x0 + bw, y0 + bh)
            if all(
                cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1]
                for b in boxes
            ):
                boxes.append(cand)
                placed.append(BBox(*map(float, cand)))
                break
        else:
            raise ValueError("could not place synthetic cell; image too crowded")
    return placed


def render_image(rng, image_id, width, height, class_ids, domain, size_range=(10, 18)):
    img = _background(rng, height, width, domain)
    boxes = place_boxes(rng, width, height, len(class_ids), size_range)
    tint = np.zeros(3) if domain is Domain.SOURCE else np.array([-30.0, -10.0, 25.0])
    anns = []
    for cls, box in zip(class_ids, boxes):
        _draw_cell(img, box, _PALETTE[cls % len(_PALETTE)] + tint, rng)
        anns.append(Annotation(int(cls), box))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ImageRecord(image_id, pixels, tuple(anns), domain)


def synthetic_dataset(
    class_counts,
    n_images,
    *,
    width=96,
    height=96,
    dense_images=0,
    dense_count=7,
    domain=Domain.SOURCE,
    seed=0,
    prefix="img",
    class_names=None,
):
    """Dataset with exactly ``class_counts[c]`` instances of each class.

    The first ``dense_images`` images receive ``dense_count`` objects each,
    taken from the most frequent classes; the remaining objects are dealt
    one at a time round-robin over the other images.
    """
    domain = Domain(domain)
    rng = np.random.default_rng(seed)
    pool = [c for c in np.argsort(-np.asarray(class_counts), kind="stable") for _ in range(class_counts[c])]
    per_image = [[] for _ in range(n_images)]
    cursor = 0
    for i in range(min(dense_images, n_images)):
        take = pool[cursor : cursor + dense_count]
        per_image[i].extend(take)
        cursor += len(take)
    rest = pool[cursor:]
    sparse_slots = list(range(dense_images, n_images)) or list(range(n_images))
    for j, cls in enumerate(rest):
        per_image[sparse_slots[j % len(sparse_slots)]].append(cls)
    width_digits = len(str(max(n_images - 1, 0)))
    images = [
        render_image(rng, f"{prefix}{i:0{width_digits}d}", width, height, per_image[i], domain)
        for i in range(n_images)
    ]
    names = class_names or [f"class{c}" for c in range(len(class_counts))]
    return DetectionDataset(tuple(names), tuple(images), domain)


def synthetic_target(num_classes, n_images=5, *, cells_per_image=3, width=96, height=96, seed=1, prefix="tgt"):
    """Small target-domain set; class ids cycle so every class is represented."""
    rng = np.random.default_rng(seed)
    images = []
    k = 0
    for i in range(n_images):
        ids = [(k + j) % num_classes for j in range(cells_per_image)]
        k += cells_per_image
        images.append(render_image(rng, f"{prefix}{i:02d}", width, height, ids, Domain.TARGET))
    names = [f"class{c}" for c in range(num_classes)]
    return DetectionDataset(tuple(names), tuple(images), Domain.TARGET)


def acceptance_source(seed=0):
    """220 images with class counts {100, 10, 5, 2}; eight of them dense."""
    return synthetic_dataset([100, 10, 5, 2], 220, dense_images=8, dense_count=7, seed=seed, prefix="src")
