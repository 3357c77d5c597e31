"""Box and mask geometry: IoU, 0-1000 normalization, area-ordered NMS."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BBox, Mask

NORM_SCALE = 1000

Candidate = tuple[BBox, "Mask | None"]


class BoxClampWarning(UserWarning):
    """A box extended past the image and was clamped before normalization."""


@dataclass(frozen=True, slots=True)
class NormBBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not 0 <= v <= NORM_SCALE:
                raise ValueError(f"normalized coordinate {v} outside [0, {NORM_SCALE}]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"corners out of order: {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou_box(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 1.0 if a == b else 0.0
    return inter / union


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    return iw * ih if iw > 0 and ih > 0 else 0.0


def iou_mask(a: Mask, b: Mask) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    if a.runs == b.runs:
        return 1.0
    aa, bb = a.to_array(), b.to_array()
    union = int(np.count_nonzero(aa | bb))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(aa & bb)) / union


def union_box(a: BBox, b: BBox) -> BBox:
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def _round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def normalize_box(b: BBox, image_width: int, image_height: int) -> NormBBox:
    if image_width <= 0 or image_height <= 0:
        raise ValueError(f"image size must be positive, got {image_width}x{image_height}")
    clamped = BBox(
        min(max(b.x1, 0), image_width),
        min(max(b.y1, 0), image_height),
        min(max(b.x2, 0), image_width),
        min(max(b.y2, 0), image_height),
    )
    if clamped != b:
        warnings.warn(
            f"box {b.as_list()} exceeds {image_width}x{image_height} image; clamped",
            BoxClampWarning,
            stacklevel=2,
        )
    x1 = _round_half_away(clamped.x1 * NORM_SCALE / image_width)
    y1 = _round_half_away(clamped.y1 * NORM_SCALE / image_height)
    x2 = _round_half_away(clamped.x2 * NORM_SCALE / image_width)
    y2 = _round_half_away(clamped.y2 * NORM_SCALE / image_height)
    # inverted inputs survive clamping; keep corner order so NormBBox stays valid
    return NormBBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def denormalize_box(nb: NormBBox, image_width: int, image_height: int) -> BBox:
    return BBox(
        nb.x1 * image_width / NORM_SCALE,
        nb.y1 * image_height / NORM_SCALE,
        nb.x2 * image_width / NORM_SCALE,
        nb.y2 * image_height / NORM_SCALE,
    )


def candidate_area(c: Candidate) -> float:
    box, mask = c
    return float(mask.area) if mask is not None else box.area


def candidate_iou(a: Candidate, b: Candidate) -> tuple[float, str]:
    """IoU of two (box, mask) candidates and which measure was used."""
    if a[1] is not None and b[1] is not None:
        return iou_mask(a[1], b[1]), "mask"
    return iou_box(a[0], b[0]), "box"


def nms_indices(candidates: Sequence[Candidate], iou_threshold: float, k: int) -> list[int]:
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    # sorted() is stable, so equal areas keep input order
    order = sorted(range(len(candidates)), key=lambda i: -candidate_area(candidates[i]))
    kept: list[int] = []
    for i in order:
        if all(candidate_iou(candidates[i], candidates[j])[0] < iou_threshold for j in kept):
            kept.append(i)
            if len(kept) == k:
                break
    return kept


def nms_by_area(
    candidates: Sequence[Candidate], iou_threshold: float = 0.6, k: int = 100
) -> list[Candidate]:
    """Greedy NMS over candidates ranked by area, largest first.

    A candidate survives if its IoU with every earlier survivor is below
    ``iou_threshold``. Mask IoU is used when both sides carry a mask.
    Returns at most ``k`` survivors in area order.
    """
    return [candidates[i] for i in nms_indices(candidates, iou_threshold, k)]
