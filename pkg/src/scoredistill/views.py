"""Camera poses and the fixed four-view grid shared by the renderers and SGC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CANONICAL_AZIMUTHS = {"front": 0.0, "right": 90.0, "back": 180.0, "left": 270.0}
# row-major order of the 2x2 grid [[front, right], [left, back]]
GRID_ORDER = ("front", "right", "left", "back")


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float = 0.0
    tag: str | None = None

    def __post_init__(self):
        if not (math.isfinite(self.azimuth) and math.isfinite(self.elevation)):
            raise ValueError("camera angles must be finite")
        az = float(self.azimuth) % 360.0
        object.__setattr__(self, "azimuth", az)
        if self.tag is not None:
            if self.tag not in CANONICAL_AZIMUTHS:
                raise ValueError(f"unknown canonical tag {self.tag!r}")
            if az != CANONICAL_AZIMUTHS[self.tag]:
                raise ValueError(f"tag {self.tag!r} requires azimuth {CANONICAL_AZIMUTHS[self.tag]}, got {az}")

    @classmethod
    def canonical(cls, tag: str, elevation: float = 0.0) -> "CameraPose":
        return cls(CANONICAL_AZIMUTHS[tag], elevation, tag)

    def key(self) -> tuple:
        return (round(self.azimuth, 9), round(self.elevation, 9))


def canonical_poses(elevation: float = 0.0) -> tuple[CameraPose, ...]:
    """The pose set C in grid order (front, right, left, back)."""
    return tuple(CameraPose.canonical(tag, elevation) for tag in GRID_ORDER)


def _stack_views(views, what: str) -> np.ndarray:
    arr = np.asarray(views, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] != 4:
        raise ValueError(f"{what} needs exactly four views, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class ViewGrid:
    """Four rendered views stacked as ``(4, ...)`` in grid order."""

    views: np.ndarray
    cameras: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "views", _stack_views(self.views, "ViewGrid"))
        cams = tuple(self.cameras) if self.cameras is not None else canonical_poses()
        if tuple(c.tag for c in cams) != GRID_ORDER:
            raise ValueError(f"grid cameras must be tagged {GRID_ORDER}")
        object.__setattr__(self, "cameras", cams)

    @property
    def view_shape(self) -> tuple:
        return self.views.shape[1:]

    def view(self, tag: str) -> np.ndarray:
        return self.views[GRID_ORDER.index(tag)]

    def composite(self) -> np.ndarray:
        return compose_grid(self.views)


@dataclass(frozen=True, eq=False)
class MultiViewReference:
    """Reference images aligned with the grid cameras, plus where they came from."""

    views: np.ndarray
    provenance: str = "fixture"

    def __post_init__(self):
        object.__setattr__(self, "views", _stack_views(self.views, "MultiViewReference"))

    def check_compatible(self, grid: ViewGrid) -> None:
        if self.views.shape != grid.views.shape:
            raise ValueError(f"reference views {self.views.shape} do not match grid {grid.views.shape}")


def compose_grid(views: np.ndarray) -> np.ndarray:
    """``(4, H, W, ...)`` -> ``(2H, 2W, ...)`` laid out [[front, right], [left, back]]."""
    v = np.asarray(views)
    top = np.concatenate([v[0], v[1]], axis=1)
    bottom = np.concatenate([v[2], v[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def split_grid(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`compose_grid`; also maps composite cotangents back to views."""
    image = np.asarray(image)
    h, w = image.shape[0] // 2, image.shape[1] // 2
    return np.stack([image[:h, :w], image[:h, w:], image[h:, :w], image[h:, w:]])
