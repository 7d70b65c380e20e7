"""Axis-aligned box arithmetic.

Coordinates are continuous pixels; areas are ``(x2 - x1) * (y2 - y1)`` with no
+1 pixel correction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2

    @classmethod
    def of(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        box = cls(*(float(c) for c in coords))
        if not box.is_valid():
            raise ValueError(f"box has x2 < x1 or y2 < y1: {list(coords)}")
        return box


@dataclass(frozen=True)
class ScoredBox:
    """One detector output: a box with its confidence, category and frame."""

    box: Box
    score: float
    category: str
    frame: int
    video_id: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.frame < 0:
            raise ValueError(f"negative frame index {self.frame}")

    def tie_key(self):
        # Total order used when scores tie.
        return (self.frame, self.box.x1, self.box.y1, self.box.x2, self.box.y2, self.category)

    def rank_key(self):
        """Sort key putting the preferred (highest score, then smallest tie key) box first."""
        return (-self.score,) + self.tie_key()


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes; 0 when the union has no area."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def union_box(boxes: Iterable[Sequence[float]]) -> Box:
    """Smallest axis-aligned box enclosing every input box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("union_box needs at least one box")
    return Box(
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )
