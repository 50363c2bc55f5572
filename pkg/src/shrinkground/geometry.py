"""Axis-aligned boxes, IoU, normalized spatial features and the shrink transform.

Coordinates are continuous image units with the origin at the top-left corner
and y growing downward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

DIRECTIONS = ("top", "bottom", "left", "right")


@dataclass(frozen=True)
class Box:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self) -> None:
        coords = (self.x_tl, self.y_tl, self.x_br, self.y_br)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x_tl < self.x_br and self.y_tl < self.y_br):
            raise ValueError(f"degenerate box: {coords}")

    @classmethod
    def from_list(cls, coords: Iterable[float]) -> "Box":
        x_tl, y_tl, x_br, y_br = (float(c) for c in coords)
        return cls(x_tl, y_tl, x_br, y_br)

    def to_list(self) -> list[float]:
        return [self.x_tl, self.y_tl, self.x_br, self.y_br]

    @property
    def w(self) -> float:
        return self.x_br - self.x_tl

    @property
    def h(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def contains(self, other: "Box") -> bool:
        return (self.x_tl <= other.x_tl and self.y_tl <= other.y_tl
                and other.x_br <= self.x_br and other.y_br <= self.y_br)

    def intersection_area(self, other: "Box") -> float:
        iw = min(self.x_br, other.x_br) - max(self.x_tl, other.x_tl)
        ih = min(self.y_br, other.y_br) - max(self.y_tl, other.y_tl)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        return iw * ih


@dataclass(frozen=True)
class ImageFrame:
    W: float
    H: float

    def __post_init__(self) -> None:
        if not (self.W > 0 and self.H > 0):
            raise ValueError(f"frame must have positive size, got {self.W}x{self.H}")

    @property
    def box(self) -> Box:
        return Box(0.0, 0.0, float(self.W), float(self.H))

    def contains(self, box: Box) -> bool:
        return self.box.contains(box)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; touching boxes give exactly 0."""
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    if a == b:
        return 1.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def shrink(p: Box, direction: str, alpha: float) -> Box:
    """Move one side of ``p`` inward by ``alpha`` times the current extent along that axis."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if direction == "top":
        return Box(p.x_tl, p.y_tl + alpha * (p.y_br - p.y_tl), p.x_br, p.y_br)
    if direction == "bottom":
        return Box(p.x_tl, p.y_tl, p.x_br, p.y_br - alpha * (p.y_br - p.y_tl))
    if direction == "left":
        return Box(p.x_tl + alpha * (p.x_br - p.x_tl), p.y_tl, p.x_br, p.y_br)
    if direction == "right":
        return Box(p.x_tl, p.y_tl, p.x_br - alpha * (p.x_br - p.x_tl), p.y_br)
    raise ValueError(f"unknown shrink direction {direction!r}")


def shrink_fixed(p: Box, direction: str, stride: float) -> Box:
    """Move one side inward by an absolute ``stride`` (the fixed-stride ablation).

    The caller is responsible for refusing strides that would invert the box.
    """
    if direction == "top":
        return Box(p.x_tl, p.y_tl + stride, p.x_br, p.y_br)
    if direction == "bottom":
        return Box(p.x_tl, p.y_tl, p.x_br, p.y_br - stride)
    if direction == "left":
        return Box(p.x_tl + stride, p.y_tl, p.x_br, p.y_br)
    if direction == "right":
        return Box(p.x_tl, p.y_tl, p.x_br - stride, p.y_br)
    raise ValueError(f"unknown shrink direction {direction!r}")


def spatial_feature(p: Box, frame: ImageFrame) -> np.ndarray:
    """5-vector of the patch corners normalized by the frame, plus the relative area."""
    if not frame.contains(p):
        raise ValueError(f"box {p.to_list()} lies outside frame {frame.W}x{frame.H}")
    W, H = float(frame.W), float(frame.H)
    return np.array([p.x_tl / W, p.y_tl / H, p.x_br / W, p.y_br / H,
                     (p.w * p.h) / (W * H)])


def clamp_to_frame(coords: Iterable[float], frame: ImageFrame) -> list[float]:
    x_tl, y_tl, x_br, y_br = coords
    return [min(max(x_tl, 0.0), frame.W), min(max(y_tl, 0.0), frame.H),
            min(max(x_br, 0.0), frame.W), min(max(y_br, 0.0), frame.H)]
