"""Multi-level instance alignment losses with analytic gradients.

Three terms are computed per neck level on pooled instance vectors:

* similarity: mean pairwise ``1 - cos`` inside each class, summed over classes
  (``literal_similarity=True`` switches to the raw mean cosine);
* dissimilarity: hinge ``max(0, cos(mean_k, mean_l) - margin)`` over pairs of
  class means;
* classification: per-class mean softmax cross-entropy of a linear head.

Each term is averaged over the three levels and the total is the
lambda-weighted sum. Values and gradients are float64 throughout.

Loss *values* come from the value kernels in :mod:`fsdakit.kernels` (numba
or numpy, same backend switch as the other kernels). They accumulate in a
canonical order (pair terms, class terms and softmax normalisers sorted;
class means summed over sorted columns) so reordering instances or
relabelling classes gives bit-identical results. Gradients are numpy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .features import DEFAULT_S, NUM_LEVELS, InstanceFeature, MultiLevelFeatures, pool_batch
from .dataset import Domain
from . import kernels
from .kernels import _class_means, _groups, _pair_cosines, _pairs

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class LossInputError(ValueError):
    pass


class ZeroNormError(LossInputError):
    pass


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    weights: np.ndarray  # (N, C)
    bias: np.ndarray  # (N,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise LossInputError(f"head shapes mismatch: weights {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise LossInputError("head has non-finite entries")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "ClassifierHead":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.005
    lambda2: float = 0.005
    lambda3: float = 0.001
    margin: float = 0.3
    literal_similarity: bool = False
    require_target: bool = True

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if not getattr(self, name) >= 0:
                raise LossInputError(f"{name} must be non-negative")
        if not -1.0 <= self.margin <= 1.0:
            raise LossInputError(f"margin must lie in [-1, 1], got {self.margin}")


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


class ClsValue(NamedTuple):
    value: float
    grad: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    num_instances: int = 0


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _as_inputs(vectors, labels):
    x = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2:
        raise LossInputError(f"vectors must be (M, C), got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise LossInputError("labels must have one entry per vector")
    return x, y


def _norms(x, what="instance"):
    n = np.sqrt((x * x).sum(axis=-1))
    bad = np.flatnonzero(n == 0)
    if bad.size:
        raise ZeroNormError(f"{what} {int(bad[0])} has zero norm")
    return n


def _cos_grad_rows(u, norms, weight_sum, g_rowsum):
    # d/dx_k sum_{l != k} w cos(x_k, x_l) for unit rows u, given
    # weight_sum = sum_{l != k} u_l and g_rowsum = sum_{l != k} cos_kl
    return (weight_sum - g_rowsum[:, None] * u) / np.maximum(norms, NORM_FLOOR)[:, None]


# ---------------------------------------------------------------------------
# the three terms
# ---------------------------------------------------------------------------


def similarity_loss(vectors, labels, *, literal: bool = False, with_grad: bool = True) -> LossValue:
    """Sum over classes of the mean pairwise ``1 - cos`` (or ``cos`` when ``literal``).

    ``with_grad=False`` skips the gradient (returned as ``None``).
    """
    x, y = _as_inputs(vectors, labels)
    norms = _norms(x)
    value = kernels.similarity_value(x, y, literal)
    if not with_grad:
        return LossValue(value, None)
    grad = np.zeros_like(x)
    for _, idx in _groups(y):
        n = len(idx)
        if n < 2:
            continue
        u = x[idx] / np.maximum(norms[idx], NORM_FLOOR)[:, None]
        g = u @ u.T
        rowsum = g.sum(axis=1) - np.diag(g)
        others = u.sum(axis=0)[None, :] - u
        dcos = _cos_grad_rows(u, norms[idx], others, rowsum)
        grad[idx] = (dcos if literal else -dcos) / (n * (n - 1) // 2)
    return LossValue(value, grad)


def dissimilarity_loss(vectors, labels, margin: float = 0.3, *, with_grad: bool = True) -> LossValue:
    """Hinged cosine between class means; fewer than two classes gives 0."""
    x, y = _as_inputs(vectors, labels)
    value, bad = kernels.dissimilarity_value(x, y, margin)
    if bad >= 0:
        raise ZeroNormError(f"class {bad} has a zero-norm mean")
    if not with_grad:
        return LossValue(value, None)
    grad = np.zeros_like(x)
    groups = _groups(y)
    if len(groups) < 2:
        return LossValue(value, grad)
    means = _class_means(x, groups)
    mnorms = np.sqrt((means * means).sum(axis=-1))
    cos = _pair_cosines(means)
    # cos == margin sits on the inactive side (zero subgradient)
    active = cos > margin
    k, l = _pairs(len(means))
    u = means / np.maximum(mnorms, NORM_FLOOR)[:, None]
    gmeans = np.zeros_like(means)
    for a, b, c in zip(k[active], l[active], cos[active]):
        gmeans[a] += (u[b] - c * u[a]) / max(mnorms[a], NORM_FLOOR)
        gmeans[b] += (u[a] - c * u[b]) / max(mnorms[b], NORM_FLOOR)
    for gi, (_, idx) in enumerate(groups):
        grad[idx] = gmeans[gi] / len(idx)
    return LossValue(value, grad)


def classification_loss(vectors, labels, head: ClassifierHead, *, with_grad: bool = True) -> ClsValue:
    """Sum over classes of the mean softmax cross-entropy of ``head``."""
    x, y = _as_inputs(vectors, labels)
    if x.shape[1] != head.weights.shape[1]:
        raise LossInputError(
            f"vector length {x.shape[1]} does not match head input size {head.weights.shape[1]}"
        )
    if y.size and (y.min() < 0 or y.max() >= head.num_classes):
        raise LossInputError(f"class id outside head range [0, {head.num_classes})")
    value = kernels.classification_value(x, y, head.weights, head.bias)
    if not with_grad:
        return ClsValue(value, None, None, None)
    logits = x @ head.weights.T + head.bias[None, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(len(y)), y] -= 1.0
    for _, idx in _groups(y):
        dlogits[idx] /= len(idx)
    grad = dlogits @ head.weights
    grad_w = dlogits.T @ x
    grad_b = dlogits.sum(axis=0)
    return ClsValue(value, grad, grad_w, grad_b)


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


@dataclass
class LevelResult:
    similarity: float
    dissimilarity: float
    classification: float
    grad_similarity: np.ndarray
    grad_dissimilarity: np.ndarray
    grad_classification: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    num_instances: int = 0


@dataclass
class LossReport:
    similarity: float
    dissimilarity: float
    classification: float
    total: float
    levels: list[LevelResult]
    grad_instances: list[np.ndarray]  # per level, (M_level, C) gradient of ``total``
    grad_heads: list[tuple[np.ndarray, np.ndarray]]  # per level, gradient of ``total``
    instances: list[list[InstanceFeature]] = field(default_factory=list)
    config: LossConfig | None = None

    def to_dict(self, include_gradients: bool = False) -> dict:
        out = {
            "L_sim": self.similarity,
            "L_dis": self.dissimilarity,
            "L_cls": self.classification,
            "L_I2DA": self.total,
            "levels": [
                {
                    "L_sim": lv.similarity,
                    "L_dis": lv.dissimilarity,
                    "L_cls": lv.classification,
                    "num_instances": lv.num_instances,
                }
                for lv in self.levels
            ],
        }
        if self.config is not None:
            out["config"] = {
                "lambda1": self.config.lambda1,
                "lambda2": self.config.lambda2,
                "lambda3": self.config.lambda3,
                "margin": self.config.margin,
                "literal_similarity": self.config.literal_similarity,
            }
        if include_gradients:
            out["grad_instances"] = [g.tolist() for g in self.grad_instances]
            out["grad_heads"] = [{"weights": w.tolist(), "bias": b.tolist()} for w, b in self.grad_heads]
        return out


def level_losses(vectors, labels, head: ClassifierHead, cfg: LossConfig, with_grad: bool = True) -> LevelResult:
    x, y = _as_inputs(vectors, labels)
    if len(x) == 0:
        z = np.zeros_like(x)
        return LevelResult(0.0, 0.0, 0.0, z, z.copy(), z.copy(), np.zeros_like(head.weights), np.zeros_like(head.bias), 0)
    sim = similarity_loss(x, y, literal=cfg.literal_similarity, with_grad=with_grad)
    dis = dissimilarity_loss(x, y, cfg.margin, with_grad=with_grad)
    cls = classification_loss(x, y, head, with_grad=with_grad)
    return LevelResult(
        sim.value, dis.value, cls.value, sim.grad, dis.grad, cls.grad, cls.grad_weights, cls.grad_bias, len(x)
    )


def combine_levels(
    levels: Sequence[tuple[np.ndarray, np.ndarray]],
    heads: Sequence[ClassifierHead],
    cfg: LossConfig,
    with_grad: bool = True,
) -> LossReport:
    """Level-averaged terms and their lambda-weighted total from per-level ``(vectors, labels)``."""
    if len(levels) != len(heads):
        raise LossInputError(f"{len(levels)} levels but {len(heads)} heads")
    n_levels = len(levels)
    results = [level_losses(x, y, h, cfg, with_grad) for (x, y), h in zip(levels, heads)]
    # fixed level order keeps the sums reproducible
    sim = sum(r.similarity for r in results) / n_levels
    dis = sum(r.dissimilarity for r in results) / n_levels
    cls = sum(r.classification for r in results) / n_levels
    total = cfg.lambda1 * sim + cfg.lambda2 * dis + cfg.lambda3 * cls
    if not with_grad:
        return LossReport(sim, dis, cls, total, results, [], [], config=cfg)
    grads = [
        (cfg.lambda1 * r.grad_similarity + cfg.lambda2 * r.grad_dissimilarity + cfg.lambda3 * r.grad_classification)
        / n_levels
        for r in results
    ]
    head_grads = [
        (cfg.lambda3 * r.grad_weights / n_levels, cfg.lambda3 * r.grad_bias / n_levels) for r in results
    ]
    return LossReport(sim, dis, cls, total, results, grads, head_grads, config=cfg)


def i2da_loss(
    batch: Sequence[MultiLevelFeatures],
    heads: Sequence[ClassifierHead],
    cfg: LossConfig = LossConfig(),
    size: int = DEFAULT_S,
) -> LossReport:
    """Pool a batch of feature records and evaluate the combined alignment loss.

    Gradients stop at the pooled instance vectors and the head parameters.
    """
    if not batch:
        raise LossInputError("empty batch")
    if len(heads) != NUM_LEVELS:
        raise LossInputError(f"{NUM_LEVELS} classifier heads required, got {len(heads)}")
    per_level = pool_batch(batch, size)
    has_target = any(inst.domain is Domain.TARGET for inst in per_level[0])
    if not has_target:
        msg = "batch holds no target-domain instance"
        if cfg.require_target:
            raise LossInputError(msg)
        log.warning(msg)
    arrays = []
    for li, insts in enumerate(per_level):
        dim = batch[0].levels[li].channels
        x = np.array([i.vector for i in insts], dtype=np.float64).reshape(len(insts), dim)
        y = np.array([i.class_id for i in insts], dtype=np.int64)
        try:
            _norms(x)
        except ZeroNormError:
            bad = int(np.flatnonzero(np.sum(x * x, axis=1) == 0)[0])
            inst = insts[bad]
            raise ZeroNormError(
                f"zero-norm instance: image {inst.image_id!r}, gt {inst.gt_index}, level {li}"
            ) from None
        arrays.append((x, y))
    report = combine_levels(arrays, heads, cfg)
    report.instances = per_level
    return report
