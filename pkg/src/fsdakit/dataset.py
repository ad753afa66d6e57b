"""In-memory detection datasets, manifest/label file I/O and few-shot samplers.

On disk a dataset is a JSON manifest::

    {"classes": [...], "domain": "source",
     "images": [{"id", "image_path", "label_path", "domain", "pasted": [...]}]}

plus one label file per image holding ``class_id cx cy w h`` lines in
normalised image coordinates. ``pasted`` lists the label line indices that
were produced by cut-paste; it may be omitted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imageio import read_image, write_image

# Float noise allowed when converting normalised labels to pixel boxes. Anything
# further outside the image is rejected, never clamped.
_BOUNDS_EPS = 1e-6
_DECIMALS = 10
_LABEL_FMT = "{cls} {cx:.10f} {cy:.10f} {w:.10f} {h:.10f}\n"


class DatasetError(ValueError):
    """Base class for malformed or inconsistent datasets."""


class LabelParseError(DatasetError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class ValidationError(DatasetError):
    pass


class SamplingError(DatasetError):
    pass


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    AUGMENTED = "augmented"


class SourceFlag(str, Enum):
    ORIGINAL = "original"
    PASTED = "pasted"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if min(vals) < 0:
            raise ValidationError(f"negative coordinate in box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def pixel_span(self) -> tuple[int, int, int, int]:
        """Integer ``(c0, r0, c1, r1)`` of every pixel the box touches."""
        return (
            math.floor(self.x_min),
            math.floor(self.y_min),
            math.ceil(self.x_max),
            math.ceil(self.y_max),
        )

    def within(self, width: float, height: float) -> bool:
        return self.x_max <= width and self.y_max <= height

    @classmethod
    def from_normalized(cls, cx, cy, w, h, img_w, img_h) -> "BBox":
        x0, x1 = (cx - w / 2) * img_w, (cx + w / 2) * img_w
        y0, y1 = (cy - h / 2) * img_h, (cy + h / 2) * img_h
        x0, y0 = _clamp_noise(x0, float(img_w)), _clamp_noise(y0, float(img_h))
        x1, y1 = _clamp_noise(x1, float(img_w)), _clamp_noise(y1, float(img_h))
        return cls(x0, y0, x1, y1)

    def to_normalized(self, img_w, img_h) -> tuple[float, float, float, float]:
        return (
            (self.x_min + self.x_max) / 2 / img_w,
            (self.y_min + self.y_max) / 2 / img_h,
            self.width / img_w,
            self.height / img_h,
        )


def _clamp_noise(value: float, bound: float) -> float:
    # only values just outside [0, bound] move; in-range values are kept exactly
    if -_BOUNDS_EPS <= value < 0.0:
        return 0.0
    if bound < value <= bound + _BOUNDS_EPS:
        return bound
    return value


@dataclass(frozen=True)
class Annotation:
    class_id: int
    bbox: BBox
    source_flag: SourceFlag = SourceFlag.ORIGINAL

    @property
    def pasted(self) -> bool:
        return self.source_flag is SourceFlag.PASTED


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image: an ``(H, W, 3)`` uint8 raster plus its annotations.

    The raster is made read-only on construction; edits go through
    :func:`dataclasses.replace` with a fresh array.
    """

    image_id: str
    pixels: np.ndarray
    annotations: tuple[Annotation, ...] = ()
    domain: Domain = Domain.SOURCE

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"image {self.image_id!r}: pixels must be (H, W, 3) uint8")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "domain", Domain(self.domain))
        for ann in self.annotations:
            if not ann.bbox.within(self.width, self.height):
                raise ValidationError(
                    f"image {self.image_id!r}: box {ann.bbox.as_tuple()} outside "
                    f"{self.width}x{self.height}"
                )

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.domain == other.domain
            and self.annotations == other.annotations
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class DetectionDataset:
    classes: tuple[str, ...]
    images: tuple[ImageRecord, ...] = ()
    domain: Domain = Domain.SOURCE
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "domain", Domain(self.domain))
        if not self.classes:
            raise ValidationError("class list is empty")
        index = {}
        n = len(self.classes)
        for pos, img in enumerate(self.images):
            if img.image_id in index:
                raise ValidationError(f"duplicate image_id {img.image_id!r}")
            index[img.image_id] = pos
            for ann in img.annotations:
                if not 0 <= ann.class_id < n:
                    raise ValidationError(
                        f"image {img.image_id!r}: class_id {ann.class_id} out of range [0, {n})"
                    )
        object.__setattr__(self, "_index", index)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def image_ids(self) -> list[str]:
        return [img.image_id for img in self.images]

    def __len__(self) -> int:
        return len(self.images)

    def image(self, image_id: str) -> ImageRecord:
        return self.images[self._index[image_id]]

    def __contains__(self, image_id) -> bool:
        return image_id in self._index

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for img in self.images:
            for ann in img.annotations:
                counts[ann.class_id] += 1
        return counts

    def subset(self, image_ids: Iterable[str]) -> "DetectionDataset":
        """Images whose id is in ``image_ids``, in dataset order."""
        wanted = set(image_ids)
        return replace(self, images=tuple(im for im in self.images if im.image_id in wanted), _index=None)

    def with_images(self, images: Sequence[ImageRecord], domain: Domain | None = None) -> "DetectionDataset":
        return DetectionDataset(self.classes, tuple(images), domain or self.domain)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def parse_label_file(path: Path, img_w: int, img_h: int, num_classes: int) -> list[tuple[int, BBox]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"label file not found: {path}")
    out = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelParseError(path, line_no, f"expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise LabelParseError(path, line_no, f"unparseable value ({exc})") from None
        if not all(math.isfinite(v) for v in (cx, cy, w, h)):
            raise LabelParseError(path, line_no, "non-finite coordinate")
        if not 0 <= cls < num_classes:
            raise ValidationError(f"{path}:{line_no}: class_id {cls} out of range [0, {num_classes})")
        try:
            box = BBox.from_normalized(cx, cy, w, h, img_w, img_h)
        except ValidationError as exc:
            raise ValidationError(f"{path}:{line_no}: {exc}") from None
        if not box.within(img_w, img_h):
            raise ValidationError(f"{path}:{line_no}: box {box.as_tuple()} outside {img_w}x{img_h}")
        out.append((cls, box))
    return out


def _fixed(v: float) -> float:
    return float(f"{v:.{_DECIMALS}f}")


def _fit_extent(center: float, extent: float, dim: int) -> float:
    """Shrink ``extent`` by last-decimal steps until the decoded edges lie inside ``[0, dim]``.

    Rounding centre and extent independently can push an edge that touches
    the border a hair outside; writing a contained box keeps
    save -> load -> save byte-stable.
    """
    for _ in range(8):
        if (center - extent / 2) * dim >= 0.0 and (center + extent / 2) * dim <= dim:
            break
        extent = _fixed(extent - 10.0**-_DECIMALS)
    return extent


def format_label_lines(image: ImageRecord) -> str:
    lines = []
    for ann in image.annotations:
        cx, cy, w, h = (_fixed(v) for v in ann.bbox.to_normalized(image.width, image.height))
        w = _fit_extent(cx, w, image.width)
        h = _fit_extent(cy, h, image.height)
        lines.append(_LABEL_FMT.format(cls=ann.class_id, cx=cx, cy=cy, w=w, h=h))
    return "".join(lines)


def load_dataset(manifest_path: str | Path) -> DetectionDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict) or "classes" not in manifest or "images" not in manifest:
        raise DatasetError(f"{manifest_path}: manifest needs 'classes' and 'images'")
    classes = [str(c) for c in manifest["classes"]]
    root = manifest_path.parent
    images = []
    for entry in manifest["images"]:
        try:
            image_id = str(entry["id"])
            image_path = root / entry["image_path"]
            label_path = root / entry["label_path"]
        except (KeyError, TypeError):
            raise DatasetError(f"{manifest_path}: image entry missing id/image_path/label_path: {entry!r}") from None
        pixels = read_image(image_path)
        h, w = pixels.shape[:2]
        parsed = parse_label_file(label_path, w, h, len(classes))
        pasted = set(entry.get("pasted", ()))
        anns = tuple(
            Annotation(cls, box, SourceFlag.PASTED if i in pasted else SourceFlag.ORIGINAL)
            for i, (cls, box) in enumerate(parsed)
        )
        images.append(ImageRecord(image_id, pixels, anns, Domain(entry.get("domain", "source"))))
    domain = manifest.get("domain")
    if domain is None:
        domains = {img.domain for img in images}
        domain = domains.pop() if len(domains) == 1 else Domain.SOURCE
    return DetectionDataset(tuple(classes), tuple(images), Domain(domain))


def _file_stem(image_id: str) -> str:
    return image_id.replace("/", "__").replace("\\", "__")


def save_dataset(dataset: DetectionDataset, out_dir: str | Path, image_ext: str = ".ppm") -> Path:
    """Write images, label files and ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for img in dataset.images:
        stem = _file_stem(img.image_id)
        image_rel = f"images/{stem}{image_ext}"
        label_rel = f"labels/{stem}.txt"
        write_image(out_dir / image_rel, img.pixels)
        (out_dir / label_rel).write_text(format_label_lines(img), encoding="utf-8")
        entry = {
            "id": img.image_id,
            "image_path": image_rel,
            "label_path": label_rel,
            "domain": img.domain.value,
        }
        pasted = [i for i, a in enumerate(img.annotations) if a.pasted]
        if pasted:
            entry["pasted"] = pasted
        entries.append(entry)
    manifest = {"classes": list(dataset.classes), "domain": dataset.domain.value, "images": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def annotations_equivalent(a: DetectionDataset, b: DetectionDataset, tol: float = 1e-6) -> bool:
    """Same classes, ids, pixels and annotations, boxes compared to ``tol`` pixels."""
    if a.classes != b.classes or a.image_ids != b.image_ids:
        return False
    for ia, ib in zip(a.images, b.images):
        if ia.pixels.shape != ib.pixels.shape or ia.pixels.tobytes() != ib.pixels.tobytes():
            return False
        if ia.domain != ib.domain or len(ia.annotations) != len(ib.annotations):
            return False
        for x, y in zip(ia.annotations, ib.annotations):
            if x.class_id != y.class_id or x.source_flag != y.source_flag:
                return False
            if max(abs(p - q) for p, q in zip(x.bbox.as_tuple(), y.bbox.as_tuple())) > tol:
                return False
    return True


# ---------------------------------------------------------------------------
# few-shot samplers
# ---------------------------------------------------------------------------


def kshot_selection(dataset: DetectionDataset, k: int, seed: int) -> dict[int, list[str]]:
    """Per class, the ``k`` image ids drawn for it (uniform, without replacement)."""
    if k < 1:
        raise SamplingError(f"k must be positive, got {k}")
    rng = np.random.default_rng(seed)
    chosen: dict[int, list[str]] = {}
    for cls, name in enumerate(dataset.classes):
        eligible = [img.image_id for img in dataset.images if any(a.class_id == cls for a in img.annotations)]
        if len(eligible) < k:
            raise SamplingError(
                f"class {name!r} (id {cls}) appears in {len(eligible)} images, {k} required"
            )
        picks = rng.choice(len(eligible), size=k, replace=False)
        chosen[cls] = [eligible[i] for i in sorted(picks)]
    return chosen


def sample_kshot(dataset: DetectionDataset, k: int, seed: int) -> DetectionDataset:
    """k images per class; an image drawn for several classes is kept once."""
    selection = kshot_selection(dataset, k, seed)
    return dataset.subset(i for ids in selection.values() for i in ids)


def sample_random_images(dataset: DetectionDataset, count: int, seed: int) -> DetectionDataset:
    if count < 1:
        raise SamplingError(f"count must be positive, got {count}")
    if count > len(dataset):
        raise SamplingError(f"requested {count} images from a dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(dataset), size=count, replace=False)
    return dataset.subset(dataset.images[i].image_id for i in picks)
