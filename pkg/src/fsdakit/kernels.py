"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The module-level names (``fill_boxes``, ``free_positions``, ...) are bound to
one backend at import time, see :mod:`fsdakit._accel`. Both backends are
always reachable through :data:`NUMPY` and :data:`NUMBA` so tests and the
benchmark can compare them directly.

Pixel convention shared by every kernel: pixel ``(row y, col x)`` is the unit
square ``[x, x+1) x [y, y+1)``. A box covers a pixel when their intersection
has positive area, so box ``(x0, y0, x1, y1)`` covers columns
``floor(x0) .. ceil(x1) - 1``.
"""

from __future__ import annotations

import math
from functools import lru_cache
from types import SimpleNamespace

import numpy as np

from ._accel import HAVE_NUMBA, USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_fill_boxes(height, width, boxes):
    mask = np.zeros((height, width), dtype=np.uint8)
    for x0, y0, x1, y1 in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        c0 = max(0, math.floor(x0))
        c1 = min(width, math.ceil(x1))
        r0 = max(0, math.floor(y0))
        r1 = min(height, math.ceil(y1))
        if c1 > c0 and r1 > r0:
            mask[r0:r1, c0:c1] = 1
    return mask


def _np_free_positions(mask, patch_h, patch_w, stride):
    h, w = mask.shape
    if patch_h > h or patch_w > w:
        return np.empty((0, 2), dtype=np.int64)
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    ys = np.arange(0, h - patch_h + 1, stride)
    xs = np.arange(0, w - patch_w + 1, stride)
    yy = ys[:, None]
    xx = xs[None, :]
    occupied = (
        integral[yy + patch_h, xx + patch_w]
        - integral[yy, xx + patch_w]
        - integral[yy + patch_h, xx]
        + integral[yy, xx]
    )
    iy, ix = np.nonzero(occupied == 0)
    return np.stack([ys[iy], xs[ix]], axis=1).astype(np.int64)


def _reflect_indices(idx, n):
    # half-sample symmetric: d c b a | a b c d | d c b a
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def gaussian_kernel_1d(sigma):
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _np_gaussian_blur(image, sigma):
    img = np.asarray(image, dtype=np.float64)
    if sigma <= 0.0:
        return img.copy()
    weights = gaussian_kernel_1d(sigma)
    radius = (len(weights) - 1) // 2
    offsets = np.arange(-radius, radius + 1)
    h, w = img.shape[:2]
    rows = _reflect_indices(np.arange(h)[:, None] + offsets[None, :], h)
    tmp = np.einsum("k,ykxc->yxc", weights, img[rows])
    cols = _reflect_indices(np.arange(w)[:, None] + offsets[None, :], w)
    return np.einsum("k,yxkc->yxc", weights, tmp[:, cols])


def _np_bilinear_upsample(fmap, size):
    fmap = np.asarray(fmap, dtype=np.float64)
    c, h, w = fmap.shape
    sy = _corner_aligned_coords(h, size)
    sx = _corner_aligned_coords(w, size)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (sy - y0)[None, :, None]
    tx = (sx - x0)[None, None, :]
    a = fmap[:, y0][:, :, x0]
    b = fmap[:, y0][:, :, x1]
    cc = fmap[:, y1][:, :, x0]
    d = fmap[:, y1][:, :, x1]
    # a + t(b - a) keeps constant inputs exact
    top = a + tx * (b - a)
    bottom = cc + tx * (d - cc)
    return top + ty * (bottom - top)


def _corner_aligned_coords(n_in, n_out):
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def _np_greedy_match(ious, thresh):
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=np.bool_)
    match = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        row = np.where(taken, -1.0, ious[d])
        if n_gt == 0:
            continue
        g = int(np.argmax(row))
        if row[g] >= thresh:
            match[d] = g
            taken[g] = True
    return match


# -- loss values ---------------------------------------------------------------
# Every sum whose operand order could depend on instance order or class ids is
# taken over sorted operands, so both backends are permutation invariant.


def _canonical_sum(values):
    return float(np.sort(np.asarray(values, dtype=np.float64), axis=None).sum())


def _groups(labels):
    """``(class_id, ascending member indices)`` per class, classes ascending."""
    if labels.size == 0:
        return []
    order = np.argsort(labels, kind="stable")
    cuts = np.flatnonzero(np.diff(labels[order])) + 1
    return [(int(labels[idx[0]]), idx) for idx in np.split(order, cuts)]


@lru_cache(maxsize=256)
def _pairs(n):
    k, l = np.triu_indices(n, 1)
    k.flags.writeable = False
    l.flags.writeable = False
    return k, l


def _pair_cosines(x):
    # sqrt(|a|^2 |b|^2) rather than |a| |b| makes cos(v, v) exactly 1
    k, l = _pairs(len(x))
    dots = (x[k] * x[l]).sum(axis=-1)
    sq = (x * x).sum(axis=-1)
    return dots / np.sqrt(sq[k] * sq[l])


def _class_means(x, groups):
    return np.stack([np.sort(x[idx], axis=0).sum(axis=0) / len(idx) for _, idx in groups])


def _np_similarity_value(x, y, literal):
    terms = []
    for _, idx in _groups(y):
        n = len(idx)
        if n < 2:
            continue
        cos = _pair_cosines(x[idx])
        terms.append(_canonical_sum(cos if literal else 1.0 - cos) / (n * (n - 1) // 2))
    return _canonical_sum(terms)


def _np_dissimilarity_value(x, y, margin):
    """``(value, class id of a zero-norm mean or -1)``."""
    groups = _groups(y)
    if len(groups) < 2:
        return 0.0, -1
    means = _class_means(x, groups)
    bad = np.flatnonzero((means * means).sum(axis=-1) == 0)
    if bad.size:
        return math.nan, groups[int(bad[0])][0]
    cos = _pair_cosines(means)
    # cos == margin is inactive
    return _canonical_sum(cos[cos > margin] - margin), -1


def _np_classification_value(x, y, weights, bias):
    logits = (x[:, None, :] * weights[None, :, :]).sum(axis=-1) + bias[None, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sort(np.exp(shifted), axis=1).sum(axis=1))
    per_instance = lse - shifted[np.arange(len(y)), y]
    return _canonical_sum([_canonical_sum(per_instance[idx]) / len(idx) for _, idx in _groups(y)])



# ---------------------------------------------------------------------------
# numba implementations (loop form)
# ---------------------------------------------------------------------------


@njit
def _nb_fill_boxes(height, width, boxes):
    mask = np.zeros((height, width), dtype=np.uint8)
    for i in range(boxes.shape[0]):
        c0 = max(0, int(math.floor(boxes[i, 0])))
        r0 = max(0, int(math.floor(boxes[i, 1])))
        c1 = min(width, int(math.ceil(boxes[i, 2])))
        r1 = min(height, int(math.ceil(boxes[i, 3])))
        for y in range(r0, r1):
            for x in range(c0, c1):
                mask[y, x] = 1
    return mask


@njit
def _nb_free_positions(mask, patch_h, patch_w, stride):
    h, w = mask.shape
    if patch_h > h or patch_w > w:
        return np.empty((0, 2), dtype=np.int64)
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    for y in range(h):
        run = 0
        for x in range(w):
            run += mask[y, x]
            integral[y + 1, x + 1] = integral[y, x + 1] + run
    ny = (h - patch_h) // stride + 1
    nx = (w - patch_w) // stride + 1
    out = np.empty((ny * nx, 2), dtype=np.int64)
    k = 0
    for iy in range(ny):
        y = iy * stride
        for ix in range(nx):
            x = ix * stride
            s = (
                integral[y + patch_h, x + patch_w]
                - integral[y, x + patch_w]
                - integral[y + patch_h, x]
                + integral[y, x]
            )
            if s == 0:
                out[k, 0] = y
                out[k, 1] = x
                k += 1
    return out[:k].copy()


@njit
def _nb_reflect(i, n):
    if n == 1:
        return 0
    period = 2 * n
    i = i % period
    if i >= n:
        i = period - 1 - i
    return i


@njit
def _nb_convolve_rows(img, weights):
    h, w, c = img.shape
    radius = (weights.shape[0] - 1) // 2
    out = np.zeros((h, w, c), dtype=np.float64)
    for y in range(h):
        for k in range(weights.shape[0]):
            src = _nb_reflect(y + k - radius, h)
            wk = weights[k]
            for x in range(w):
                for ch in range(c):
                    out[y, x, ch] += wk * img[src, x, ch]
    return out


@njit
def _nb_convolve_cols(img, weights):
    h, w, c = img.shape
    radius = (weights.shape[0] - 1) // 2
    out = np.zeros((h, w, c), dtype=np.float64)
    for x in range(w):
        for k in range(weights.shape[0]):
            src = _nb_reflect(x + k - radius, w)
            wk = weights[k]
            for y in range(h):
                for ch in range(c):
                    out[y, x, ch] += wk * img[y, src, ch]
    return out


def _nb_gaussian_blur(image, sigma):
    img = np.ascontiguousarray(image, dtype=np.float64)
    if sigma <= 0.0:
        return img.copy()
    weights = gaussian_kernel_1d(sigma)
    return _nb_convolve_cols(_nb_convolve_rows(img, weights), weights)


@njit
def _nb_bilinear_kernel(fmap, size):
    c, h, w = fmap.shape
    out = np.empty((c, size, size), dtype=np.float64)
    scale_y = 0.0 if (size == 1 or h == 1) else (h - 1) / (size - 1)
    scale_x = 0.0 if (size == 1 or w == 1) else (w - 1) / (size - 1)
    for i in range(size):
        sy = i * scale_y
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ty = sy - y0
        for j in range(size):
            sx = j * scale_x
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            tx = sx - x0
            for ch in range(c):
                a = fmap[ch, y0, x0]
                top = a + tx * (fmap[ch, y0, x1] - a)
                cc = fmap[ch, y1, x0]
                bottom = cc + tx * (fmap[ch, y1, x1] - cc)
                out[ch, i, j] = top + ty * (bottom - top)
    return out


def _nb_bilinear_upsample(fmap, size):
    return _nb_bilinear_kernel(np.ascontiguousarray(fmap, dtype=np.float64), int(size))


@njit
def _nb_greedy_match_kernel(ious, thresh):
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=np.bool_)
    match = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = -1
        best_iou = -1.0
        for g in range(n_gt):
            if not taken[g] and ious[d, g] > best_iou:
                best_iou = ious[d, g]
                best = g
        if best >= 0 and best_iou >= thresh:
            match[d] = best
            taken[best] = True
    return match


def _nb_fill_boxes_wrapper(height, width, boxes):
    arr = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return _nb_fill_boxes(int(height), int(width), arr)


def _nb_free_positions_wrapper(mask, patch_h, patch_w, stride):
    return _nb_free_positions(
        np.ascontiguousarray(mask, dtype=np.uint8), int(patch_h), int(patch_w), int(stride)
    )


def _nb_greedy_match(ious, thresh):
    return _nb_greedy_match_kernel(np.ascontiguousarray(ious, dtype=np.float64), float(thresh))


@njit
def _nb_sorted_sum(values):
    s = np.sort(values)
    acc = 0.0
    for v in s:
        acc += v
    return acc


@njit
def _nb_cos(a, b):
    dot = 0.0
    sa = 0.0
    sb = 0.0
    for k in range(a.shape[0]):
        dot += a[k] * b[k]
        sa += a[k] * a[k]
        sb += b[k] * b[k]
    return dot / math.sqrt(sa * sb)


@njit
def _nb_similarity_kernel(x, y, literal):
    classes = np.unique(y)
    terms = np.zeros(classes.shape[0])
    for ci in range(classes.shape[0]):
        idx = np.nonzero(y == classes[ci])[0]
        n = idx.shape[0]
        if n < 2:
            continue
        vals = np.empty(n * (n - 1) // 2)
        p = 0
        for a in range(n):
            for b in range(a + 1, n):
                c = _nb_cos(x[idx[a]], x[idx[b]])
                vals[p] = c if literal else 1.0 - c
                p += 1
        terms[ci] = _nb_sorted_sum(vals) / vals.shape[0]
    return _nb_sorted_sum(terms)


@njit
def _nb_dissimilarity_kernel(x, y, margin):
    classes = np.unique(y)
    nc = classes.shape[0]
    if nc < 2:
        return 0.0, -1
    dim = x.shape[1]
    means = np.empty((nc, dim))
    buf = np.empty(y.shape[0])
    for ci in range(nc):
        idx = np.nonzero(y == classes[ci])[0]
        n = idx.shape[0]
        sq = 0.0
        for k in range(dim):
            # insertion sort: classes hold a handful of instances
            for a in range(n):
                v = x[idx[a], k]
                b = a
                while b > 0 and buf[b - 1] > v:
                    buf[b] = buf[b - 1]
                    b -= 1
                buf[b] = v
            acc = 0.0
            for a in range(n):
                acc += buf[a]
            means[ci, k] = acc / n
            sq += means[ci, k] * means[ci, k]
        if sq == 0.0:
            return math.nan, classes[ci]
    vals = np.zeros(nc * (nc - 1) // 2)
    p = 0
    for a in range(nc):
        for b in range(a + 1, nc):
            c = _nb_cos(means[a], means[b])
            if c > margin:
                vals[p] = c - margin
            p += 1
    return _nb_sorted_sum(vals), -1


@njit
def _nb_classification_kernel(x, y, weights, bias):
    m = x.shape[0]
    nh = weights.shape[0]
    per_instance = np.empty(m)
    logits = np.empty(nh)
    for i in range(m):
        top = -np.inf
        for j in range(nh):
            z = 0.0
            for k in range(x.shape[1]):
                z += x[i, k] * weights[j, k]
            logits[j] = z + bias[j]
            top = max(top, logits[j])
        lse = math.log(_nb_sorted_sum(np.exp(logits - top)))
        per_instance[i] = lse - (logits[y[i]] - top)
    classes = np.unique(y)
    terms = np.empty(classes.shape[0])
    for ci in range(classes.shape[0]):
        members = per_instance[y == classes[ci]]
        terms[ci] = _nb_sorted_sum(members) / members.shape[0]
    return _nb_sorted_sum(terms)


def _nb_similarity_value(x, y, literal):
    return _nb_similarity_kernel(x, y, bool(literal))


def _nb_dissimilarity_value(x, y, margin):
    v, bad = _nb_dissimilarity_kernel(x, y, float(margin))
    return v, int(bad)


def _nb_classification_value(x, y, weights, bias):
    if len(x) == 0:
        return 0.0
    return _nb_classification_kernel(x, y, weights, bias)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

NUMPY = SimpleNamespace(
    name="numpy",
    fill_boxes=_np_fill_boxes,
    free_positions=_np_free_positions,
    gaussian_blur=_np_gaussian_blur,
    bilinear_upsample=_np_bilinear_upsample,
    greedy_match=_np_greedy_match,
    similarity_value=_np_similarity_value,
    dissimilarity_value=_np_dissimilarity_value,
    classification_value=_np_classification_value,
)

NUMBA = (
    SimpleNamespace(
        name="numba",
        fill_boxes=_nb_fill_boxes_wrapper,
        free_positions=_nb_free_positions_wrapper,
        gaussian_blur=_nb_gaussian_blur,
        bilinear_upsample=_nb_bilinear_upsample,
        greedy_match=_nb_greedy_match,
        similarity_value=_nb_similarity_value,
        dissimilarity_value=_nb_dissimilarity_value,
        classification_value=_nb_classification_value,
    )
    if HAVE_NUMBA
    else None
)

ACTIVE = NUMBA if USE_NUMBA else NUMPY
BACKEND = ACTIVE.name

fill_boxes = ACTIVE.fill_boxes
free_positions = ACTIVE.free_positions
gaussian_blur = ACTIVE.gaussian_blur
bilinear_upsample = ACTIVE.bilinear_upsample
greedy_match = ACTIVE.greedy_match
similarity_value = ACTIVE.similarity_value
dissimilarity_value = ACTIVE.dissimilarity_value
classification_value = ACTIVE.classification_value
