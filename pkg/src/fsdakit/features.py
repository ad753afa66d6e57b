"""Multi-level neck feature records: dump file I/O, upsampling and instance pooling.

Dump layout: the magic ``b"FSDF1\\n"`` followed by records. Each record is one
UTF-8 JSON header line::

    {"image_id": ..., "image_w": ..., "image_h": ...,
     "levels": [{"C": ..., "H": ..., "W": ...}, x3],
     "gt": [{"class_id": ..., "bbox": [x0, y0, x1, y1], "domain": "source"|"target"}]}

and then the raw little-endian float32 payload of each level, channel-major,
in declared order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .dataset import BBox, Domain

MAGIC = b"FSDF1\n"
NUM_LEVELS = 3
DEFAULT_S = 64
_LE_F32 = np.dtype("<f4")


class FeatureDumpError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``(C, H, W)`` feature values. Dumps store float32; upsampled maps are float64."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise FeatureDumpError(f"feature map must be (C, H, W) with every dim >= 1, got {v.shape}")
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise FeatureDumpError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def height(self) -> int:
        return int(self.values.shape[1])

    @property
    def width(self) -> int:
        return int(self.values.shape[2])


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    bbox: BBox
    domain: Domain = Domain.SOURCE


@dataclass(frozen=True, eq=False)
class MultiLevelFeatures:
    image_id: str
    image_w: int
    image_h: int
    levels: tuple[FeatureMap, ...]
    gt: tuple[GroundTruth, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "gt", tuple(self.gt))
        if len(self.levels) != NUM_LEVELS:
            raise FeatureDumpError(
                f"record {self.image_id!r}: exactly {NUM_LEVELS} levels required, got {len(self.levels)}"
            )
        if self.image_w < 1 or self.image_h < 1:
            raise FeatureDumpError(f"record {self.image_id!r}: bad image size {self.image_w}x{self.image_h}")
        for g in self.gt:
            if not g.bbox.within(self.image_w, self.image_h):
                raise FeatureDumpError(f"record {self.image_id!r}: gt box {g.bbox.as_tuple()} outside image")


@dataclass(frozen=True)
class InstanceFeature:
    vector: np.ndarray
    class_id: int
    domain: Domain
    level_index: int
    gt_index: int = 0
    image_id: str = ""


# ---------------------------------------------------------------------------
# dump I/O
# ---------------------------------------------------------------------------


def _header(rec: MultiLevelFeatures) -> bytes:
    head = {
        "image_id": rec.image_id,
        "image_w": rec.image_w,
        "image_h": rec.image_h,
        "levels": [{"C": m.channels, "H": m.height, "W": m.width} for m in rec.levels],
        "gt": [
            {"class_id": g.class_id, "bbox": list(g.bbox.as_tuple()), "domain": Domain(g.domain).value}
            for g in rec.gt
        ],
    }
    return (json.dumps(head, separators=(",", ":")) + "\n").encode("utf-8")


def write_feature_dump(path: str | Path, records: Iterable[MultiLevelFeatures]) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for rec in records:
            fh.write(_header(rec))
            for level in rec.levels:
                fh.write(np.ascontiguousarray(level.values, dtype=_LE_F32).tobytes())
    return path


def _parse_header(line: bytes, offset: int) -> dict:
    try:
        head = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FeatureDumpError(f"bad record header at byte {offset}: {exc}") from None
    for key in ("image_id", "image_w", "image_h", "levels", "gt"):
        if key not in head:
            raise FeatureDumpError(f"record header at byte {offset} lacks {key!r}")
    return head


def read_feature_dump(path: str | Path) -> list[MultiLevelFeatures]:
    """All records of a dump; raises instead of returning a partial list."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"feature dump not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise FeatureDumpError(f"{path}: bad magic")
    pos = len(MAGIC)
    records = []
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FeatureDumpError(f"{path}: truncated record header at byte {pos}")
        head = _parse_header(data[pos:nl], pos)
        pos = nl + 1
        if len(head["levels"]) != NUM_LEVELS:
            raise FeatureDumpError(
                f"{path}: record {head['image_id']!r} declares {len(head['levels'])} levels, "
                f"exactly {NUM_LEVELS} required"
            )
        levels = []
        for spec in head["levels"]:
            c, h, w = int(spec["C"]), int(spec["H"]), int(spec["W"])
            if min(c, h, w) < 1:
                raise FeatureDumpError(f"{path}: bad level shape {(c, h, w)}")
            nbytes = c * h * w * 4
            if pos + nbytes > len(data):
                raise FeatureDumpError(f"{path}: truncated payload for record {head['image_id']!r}")
            vals = np.frombuffer(data, dtype=_LE_F32, count=c * h * w, offset=pos).reshape(c, h, w)
            pos += nbytes
            if not np.all(np.isfinite(vals)):
                raise FeatureDumpError(f"{path}: non-finite value in record {head['image_id']!r}")
            levels.append(FeatureMap(vals.astype(np.float32)))
        gt = tuple(
            GroundTruth(int(g["class_id"]), BBox(*map(float, g["bbox"])), Domain(g.get("domain", "source")))
            for g in head["gt"]
        )
        records.append(
            MultiLevelFeatures(str(head["image_id"]), int(head["image_w"]), int(head["image_h"]), tuple(levels), gt)
        )
    return records


# ---------------------------------------------------------------------------
# upsampling and pooling
# ---------------------------------------------------------------------------


def upsample_level(fmap: FeatureMap, size: int = DEFAULT_S) -> FeatureMap:
    """Corner-aligned bilinear resize to ``(C, size, size)``, computed in float64."""
    if size < 1:
        raise ValueError(f"S must be >= 1, got {size}")
    return FeatureMap(kernels.bilinear_upsample(fmap.values, int(size)))


def _snap_int(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < 1e-9 else v


def grid_cells(box: BBox, image_w: int, image_h: int, size: int) -> tuple[int, int, int, int]:
    """Outward-rounded ``(x0, y0, x1, y1)`` cell range of ``box`` on a size x size grid."""

    def axis(lo, hi, dim):
        a = math.floor(_snap_int(lo * size / dim))
        b = math.ceil(_snap_int(hi * size / dim))
        a, b = max(0, min(a, size)), max(0, min(b, size))
        if b <= a:
            if a < size:
                b = a + 1
            else:
                a = b - 1
        return a, b

    x0, x1 = axis(box.x_min, box.x_max, image_w)
    y0, y1 = axis(box.y_min, box.y_max, image_h)
    return x0, y0, x1, y1


def pool_instances(mlf: MultiLevelFeatures, size: int = DEFAULT_S) -> list[InstanceFeature]:
    """Average-pooled vector for every (level, gt) pair, level-major order."""
    out = []
    cells = [grid_cells(g.bbox, mlf.image_w, mlf.image_h, size) for g in mlf.gt]
    for li, level in enumerate(mlf.levels):
        if not mlf.gt:
            continue
        up = upsample_level(level, size).values
        for gi, (g, (x0, y0, x1, y1)) in enumerate(zip(mlf.gt, cells)):
            vec = up[:, y0:y1, x0:x1].mean(axis=(1, 2))
            out.append(InstanceFeature(vec, g.class_id, Domain(g.domain), li, gi, mlf.image_id))
    return out


def pool_batch(batch: Sequence[MultiLevelFeatures], size: int = DEFAULT_S) -> list[list[InstanceFeature]]:
    """Instances of a whole batch split by level."""
    per_level: list[list[InstanceFeature]] = [[] for _ in range(NUM_LEVELS)]
    for rec in batch:
        for inst in pool_instances(rec, size):
            per_level[inst.level_index].append(inst)
    return per_level
