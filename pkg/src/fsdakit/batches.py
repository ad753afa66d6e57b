"""Per-epoch batch schedules mixing target, real source and augmented source images.

Every batch carries exactly one few-shot target image (drawn with
replacement). The remaining slots pick the real-source pool with probability
30/98 and the augmented pool with 68/98; within each pool images are drawn
without replacement until the pool runs out, then with replacement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import DetectionDataset

TARGET, SOURCE, AUGMENTED = "target", "source", "augmented"
# nominal per-batch percentages; the target share is superseded by the
# one-target-per-batch guarantee and only reported
NOMINAL_MIX = {TARGET: 2.0, SOURCE: 30.0, AUGMENTED: 68.0}
DEFAULT_BATCH_SIZE = 4


class ScheduleError(ValueError):
    pass


@dataclass
class BatchSchedule:
    batches: list[list[tuple[str, str]]]
    batch_size: int
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.batches)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"batch": i, "entries": [list(e) for e in b]}, separators=(",", ":")) + "\n"
            for i, b in enumerate(self.batches)
        )

    def slot_counts(self) -> dict[str, int]:
        counts = {TARGET: 0, SOURCE: 0, AUGMENTED: 0}
        for batch in self.batches:
            for tag, _ in batch:
                counts[tag] += 1
        return counts


class _Pool:
    """Draws ids without replacement until exhausted, then with replacement."""

    def __init__(self, ids: Sequence[str], rng: np.random.Generator):
        self.ids = list(ids)
        self.order = [self.ids[i] for i in rng.permutation(len(self.ids))]
        self.pos = 0
        self.rng = rng

    def draw(self) -> str:
        if self.pos < len(self.order):
            self.pos += 1
            return self.order[self.pos - 1]
        return self.ids[int(self.rng.integers(len(self.ids)))]


def compose_schedule(
    source: DetectionDataset,
    augmented: DetectionDataset,
    target: DetectionDataset,
    batch_size: int = DEFAULT_BATCH_SIZE,
    epoch_len: int | None = None,
    seed: int = 0,
    mix: tuple[float, float] = (NOMINAL_MIX[SOURCE], NOMINAL_MIX[AUGMENTED]),
) -> BatchSchedule:
    """``epoch_len`` batches (default: enough slots to cover both source pools once)."""
    if batch_size < 2:
        raise ScheduleError("batch_size must be >= 2 to hold a target image plus source data")
    for name, ds in ((SOURCE, source), (AUGMENTED, augmented), (TARGET, target)):
        if len(ds) == 0:
            raise ScheduleError(f"{name} dataset is empty")
    if epoch_len is None:
        epoch_len = -(-(len(source) + len(augmented)) // (batch_size - 1))
    if epoch_len < 1:
        raise ScheduleError("epoch_len must be positive")
    w_src, w_aug = mix
    if w_src < 0 or w_aug < 0 or w_src + w_aug <= 0:
        raise ScheduleError(f"bad source/augmented mix {mix}")
    p_source = w_src / (w_src + w_aug)

    rng = np.random.default_rng(seed)
    target_ids = target.image_ids
    pools = {SOURCE: _Pool(source.image_ids, rng), AUGMENTED: _Pool(augmented.image_ids, rng)}
    batches = []
    for _ in range(epoch_len):
        batch = [(TARGET, target_ids[int(rng.integers(len(target_ids)))])]
        for _slot in range(batch_size - 1):
            tag = SOURCE if rng.random() < p_source else AUGMENTED
            batch.append((tag, pools[tag].draw()))
        batches.append(batch)

    slots = epoch_len * batch_size
    meta = {
        "batch_size": batch_size,
        "epoch_len": epoch_len,
        "seed": seed,
        "nominal_mix_percent": dict(NOMINAL_MIX),
        "non_target_probabilities": {SOURCE: p_source, AUGMENTED: 1.0 - p_source},
        "target_share_of_slots": epoch_len / slots,
        "note": "one target image per batch; the nominal 2% target share is below one image at this batch size",
    }
    return BatchSchedule(batches, batch_size, meta)
