"""Reference oracles used by the test suite and ``fsdakit selftest``.

Everything here is written independently of the production paths: plain
loops, the ``math`` module and brute-force enumeration. They are slow on
purpose and only meant for small inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


# -- gradients ---------------------------------------------------------------


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both are below ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# -- loss values -------------------------------------------------------------


def _cos(a, b) -> float:
    dot = math.fsum(p * q for p, q in zip(a, b))
    na = math.sqrt(math.fsum(p * p for p in a))
    nb = math.sqrt(math.fsum(q * q for q in b))
    return dot / (na * nb)


def _by_class(vectors, labels) -> dict[int, list[list[float]]]:
    out: dict[int, list[list[float]]] = {}
    for v, c in zip(vectors, labels):
        out.setdefault(int(c), []).append([float(t) for t in v])
    return out


def similarity_oracle(vectors, labels, literal: bool = False) -> float:
    total = 0.0
    for members in _by_class(vectors, labels).values():
        n = len(members)
        if n < 2:
            continue
        acc = 0.0
        for k in range(n):
            for l in range(k + 1, n):
                c = _cos(members[k], members[l])
                acc += c if literal else 1.0 - c
        total += acc / math.comb(n, 2)
    return total


def class_means_oracle(vectors, labels) -> dict[int, list[float]]:
    means = {}
    for c, members in _by_class(vectors, labels).items():
        means[c] = [math.fsum(col) / len(members) for col in zip(*members)]
    return means


def dissimilarity_oracle(vectors, labels, margin: float) -> float:
    means = class_means_oracle(vectors, labels)
    keys = sorted(means)
    total = 0.0
    for i, k in enumerate(keys):
        for l in keys[i + 1 :]:
            total += max(0.0, _cos(means[k], means[l]) - margin)
    return total


def class_mean_cosines(vectors, labels) -> list[float]:
    means = class_means_oracle(vectors, labels)
    keys = sorted(means)
    return [_cos(means[k], means[l]) for i, k in enumerate(keys) for l in keys[i + 1 :]]


def classification_oracle(vectors, labels, weights, bias) -> float:
    per_class: dict[int, list[float]] = {}
    for v, c in zip(vectors, labels):
        logits = [math.fsum(w * t for w, t in zip(row, v)) + b for row, b in zip(weights, bias)]
        top = max(logits)
        lse = top + math.log(math.fsum(math.exp(z - top) for z in logits))
        per_class.setdefault(int(c), []).append(lse - logits[int(c)])
    return sum(math.fsum(v) / len(v) for _, v in sorted(per_class.items()))


# -- geometry ----------------------------------------------------------------


def box_pixels(box, width: int, height: int) -> np.ndarray:
    """Boolean raster of the pixels whose unit square meets ``box`` with positive area."""
    x0, y0, x1, y1 = box
    xs = np.arange(width)
    ys = np.arange(height)
    cols = (xs < x1) & (xs + 1 > x0)
    rows = (ys < y1) & (ys + 1 > y0)
    return rows[:, None] & cols[None, :]


def pasted_overlap_pixels(image) -> int:
    """Pixels shared between any pasted annotation and any other annotation."""
    shared = 0
    rasters = [box_pixels(a.bbox.as_tuple(), image.width, image.height) for a in image.annotations]
    for i, a in enumerate(image.annotations):
        if not a.pasted:
            continue
        for j in range(len(image.annotations)):
            if j != i:
                shared += int(np.count_nonzero(rasters[i] & rasters[j]))
    return shared


def bilinear_oracle(values: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize, straight from the interpolation formula."""
    c, h, w = values.shape
    out = np.zeros((c, size, size))
    for i in range(size):
        sy = 0.0 if size == 1 or h == 1 else i * (h - 1) / (size - 1)
        for j in range(size):
            sx = 0.0 if size == 1 or w == 1 else j * (w - 1) / (size - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for ch in range(c):
                out[ch, i, j] = (
                    (1 - fy) * (1 - fx) * values[ch, y0, x0]
                    + (1 - fy) * fx * values[ch, y0, x1]
                    + fy * (1 - fx) * values[ch, y1, x0]
                    + fy * fx * values[ch, y1, x1]
                )
    return out


# -- average precision ---------------------------------------------------------


def _iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    if inter == 0:
        return 0.0
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _greedy_tp(dets, gts, thresh) -> int:
    """True positives among ``dets`` (already in rank order)."""
    taken = set()
    tp = 0
    for image_id, box in dets:
        best, best_iou = None, -1.0
        for gi, (gimg, gbox) in enumerate(gts):
            if gimg != image_id or gi in taken:
                continue
            v = _iou(box, gbox)
            if v > best_iou:
                best, best_iou = gi, v
        if best is not None and best_iou >= thresh:
            taken.add(best)
            tp += 1
    return tp


def ap_bruteforce(dets: Sequence[tuple[str, tuple, float]], gts: Sequence[tuple[str, tuple]], thresh: float) -> float:
    """AP from the PR points of every confidence cut-off, re-matching from scratch each time.

    ``dets`` are ``(image_id, box, confidence)`` of one class and ``gts`` are
    ``(image_id, box)``. Interpolated precision at recall r is the best
    precision reached at any recall >= r; AP integrates it over [0, 1].
    """
    if not gts:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])
    ranked = [(dets[i][0], dets[i][1]) for i in order]
    points = []
    for cut in range(1, len(ranked) + 1):
        tp = _greedy_tp(ranked[:cut], gts, thresh)
        points.append((tp / len(gts), tp / cut))
    recalls = sorted({r for r, _ in points if r > 0})
    ap = 0.0
    prev = 0.0
    for r in recalls:
        best = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * best
        prev = r
    return ap
