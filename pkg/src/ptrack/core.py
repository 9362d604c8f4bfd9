"""Shared value types and small pure operations used across the tracker.

Conventions:
  - images/heatmaps are numpy arrays indexed [row, col] with shape (H, W);
  - boxes are integer pixel rectangles (x, y, w, h) with x = left column,
    y = top row; a box covers columns [x, x+w) and rows [y, y+h);
  - heatmaps hold finite scores >= 0 (score grids are rectified upstream).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np


class MotionChoice(enum.Enum):
    TRACK = "TRACK"
    REINIT = "REINIT"


class AppearanceChoice(enum.Enum):
    UPDATE = "UPDATE"
    IGNORE = "IGNORE"


@dataclass(frozen=True)
class Action:
    """Joint per-frame decision: one motion choice and one appearance choice."""

    motion: MotionChoice
    appearance: AppearanceChoice

    def as_pair(self) -> tuple[str, str]:
        return (self.motion.value, self.appearance.value)


TRACK_UPDATE = Action(MotionChoice.TRACK, AppearanceChoice.UPDATE)
TRACK_IGNORE = Action(MotionChoice.TRACK, AppearanceChoice.IGNORE)
REINIT_UPDATE = Action(MotionChoice.REINIT, AppearanceChoice.UPDATE)
REINIT_IGNORE = Action(MotionChoice.REINIT, AppearanceChoice.IGNORE)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel rectangle; width and height must be positive."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive extent, got w={self.w} h={self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def center(self) -> tuple[int, int]:
        """(row, col) of the box center cell (floor convention)."""
        return (self.y + self.h // 2, self.x + self.w // 2)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Frame:
    """One grayscale video frame; pixels are float values in [0, 1]."""

    index: int
    pixels: np.ndarray  # (H, W)


@dataclass(frozen=True)
class AppearanceModel:
    """Linear correlation filter over the feature map.

    filter_weights has shape (fh, fw, n_channels) with odd fh, fw so the
    filter has an unambiguous center cell. target_size = (w, h) in pixels.
    """

    filter_weights: np.ndarray
    target_size: tuple[int, int]

    def __post_init__(self) -> None:
        fh, fw = self.filter_weights.shape[:2]
        if fh % 2 == 0 or fw % 2 == 0:
            raise ValueError(f"filter dims must be odd, got {fh}x{fw}")
        w, h = self.target_size
        if w <= 0 or h <= 0:
            raise ValueError(f"target_size must be positive, got {self.target_size}")


@dataclass(frozen=True)
class Belief:
    """Tracker belief carried between frames: appearance filter + heatmap."""

    appearance: AppearanceModel
    heatmap: np.ndarray  # (H, W), scores >= 0


@dataclass(frozen=True)
class AgentState:
    """Decision input at frame i: belief from frame i-1 plus the new frame."""

    belief: Belief
    frame: Frame


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = max(a.x, b.x)
    iy = max(a.y, b.y)
    ix2 = min(a.x + a.w, b.x + b.w)
    iy2 = min(a.y + a.h, b.y + b.h)
    iw = max(0, ix2 - ix)
    ih = max(0, iy2 - iy)
    inter = iw * ih
    if inter == 0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


def clamp_box(x: int, y: int, w: int, h: int, frame_h: int, frame_w: int) -> BoundingBox:
    """Shift (x, y) so the w*h box lies inside the frame (size clamped to fit)."""
    w = min(w, frame_w)
    h = min(h, frame_h)
    x = min(max(x, 0), frame_w - w)
    y = min(max(y, 0), frame_h - h)
    return BoundingBox(x, y, w, h)


def box_around(center_row: int, center_col: int, size: tuple[int, int],
               frame_h: int, frame_w: int) -> BoundingBox:
    """Box of `size` = (w, h) centered at a cell, clamp-shifted into the frame.

    Center convention matches BoundingBox.center(): center = top-left + size//2,
    so for an interior cell box_around(...).center() == (center_row, center_col).
    """
    w, h = size
    return clamp_box(center_col - w // 2, center_row - h // 2, w, h, frame_h, frame_w)


def argmax_cell(h: np.ndarray) -> tuple[int, int]:
    """(row, col) of the maximal cell; ties resolve to the row-major first."""
    idx = int(np.argmax(h))
    r, c = divmod(idx, h.shape[1])
    return (r, c)


def extract_box(h: np.ndarray, target_size: tuple[int, int]) -> BoundingBox:
    """Box of target_size centered on the heatmap peak, kept inside the frame."""
    r, c = argmax_cell(h)
    return box_around(r, c, target_size, h.shape[0], h.shape[1])


# An array whose float64 sum is this close to 1 counts as already normalized;
# dividing by (1 +- 1e-12) would only churn last-place bits, and skipping the
# division makes normalize exactly idempotent.
_NORMALIZED_ATOL = 1e-12


def normalize(h: np.ndarray) -> np.ndarray:
    """Scale a non-negative score grid to sum to 1; all-zero maps to uniform.

    Exactly idempotent: a result of normalize always re-normalizes to itself
    bit-for-bit (inputs already summing to 1 within a tiny tolerance are
    returned unchanged).
    """
    out = np.array(h, dtype=np.float64, copy=True)
    s = float(out.sum())
    if s <= 0.0:
        out = np.full(out.shape, 1.0 / out.size, dtype=np.float64)
        s = float(out.sum())
    if abs(s - 1.0) <= _NORMALIZED_ATOL:
        return out
    out /= s
    return out


def visible_box(box: Optional[BoundingBox], occluded: bool) -> Optional[BoundingBox]:
    """The box a detector could legitimately hit: None when target not visible."""
    if box is None or occluded:
        return None
    return box
