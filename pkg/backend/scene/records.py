"""Scene descriptor records.

Frames and axes:
  - ego / LiDAR frame: x forward, y left, z up, meters; frame 0 is the clip origin.
  - camera frame: x right, y down, z forward (pinhole convention). ``CameraPose.rotation``
    maps camera axes to ego axes, ``translation`` is the camera centre in the ego frame.
  - box corners: bottom face first (z = -h/2) then top face, each face walked
    front-left, front-right, rear-right, rear-left in the box's own frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

OBJECT_CLASSES: Tuple[str, ...] = ("car", "pedestrian", "cyclist")
MAP_CHANNELS: Tuple[str, ...] = ("drivable", "lane_divider", "crosswalk", "walkway")
WEATHER_TOKENS: Tuple[str, ...] = ("sunny", "rainy", "cloudy")
TIME_TOKENS: Tuple[str, ...] = ("day", "night")

DEFAULT_FPS = 12.0
CUBOID_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid rigid transform, rotation or cuboid."""


def _as_matrix(value, shape: Tuple[int, ...], what: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{what}: expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics
    name: str = ""

    def __post_init__(self) -> None:
        self.rotation = _as_matrix(self.rotation, (3, 3), "camera rotation")
        self.translation = _as_matrix(self.translation, (3,), "camera translation")

    def to_vector(self) -> np.ndarray:
        """Rotation (9) + translation (3) + intrinsics normalized by image size (4)."""
        k = self.intrinsics
        scaled = [k.fx / k.width, k.fy / k.height, k.cx / k.width, k.cy / k.height]
        return np.concatenate([self.rotation.reshape(-1), self.translation, scaled])


@dataclass
class RoadMapRaster:
    """Binary BEV grid (rows along ego x, columns along ego y, semantic channels last)."""

    grid: np.ndarray
    meters_per_cell: float = 1.0

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid)
        if grid.ndim != 3 or grid.shape[-1] != len(MAP_CHANNELS):
            raise GeometryError(f"map grid must be (w, h, {len(MAP_CHANNELS)}), got {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise GeometryError("map grid entries must be 0 or 1")
        self.grid = grid.astype(np.uint8)

    @property
    def cells(self) -> Tuple[int, int]:
        return int(self.grid.shape[0]), int(self.grid.shape[1])


@dataclass
class Box3D:
    corners: np.ndarray
    label: int
    track_id: int = -1

    def __post_init__(self) -> None:
        self.corners = _as_matrix(self.corners, (8, 3), "box corners")
        if not 0 <= int(self.label) < len(OBJECT_CLASSES):
            raise GeometryError(f"box class {self.label} outside [0, {len(OBJECT_CLASSES)})")

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)


@dataclass
class EgoTransform:
    """Frame-t LiDAR → frame-0 LiDAR."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.rotation = _as_matrix(self.rotation, (3, 3), "ego rotation")
        self.translation = _as_matrix(self.translation, (3,), "ego translation")

    @classmethod
    def identity(cls) -> "EgoTransform":
        return cls()

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.abs(self.rotation - np.eye(3)).max() <= tol and np.abs(self.translation).max() <= tol)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(-1), self.translation])


@dataclass(frozen=True)
class TextPrompt:
    tokens: Tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: Optional[str]) -> "TextPrompt":
        from backend.services.utils import normalize_text

        cleaned = normalize_text(text)
        return cls(tuple(cleaned.split(" ")) if cleaned else ())

    def __str__(self) -> str:
        return " ".join(self.tokens)


@dataclass
class SceneFrame:
    cameras: List[CameraPose]
    map: RoadMapRaster
    boxes: List[Box3D]
    text: TextPrompt
    ego: EgoTransform


@dataclass
class VideoClip:
    """Unit-scaled pixels laid out (T, C, H, W, 3)."""

    pixels: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 5 or pixels.shape[-1] != 3:
            raise ValueError(f"video clip must be (T, C, H, W, 3), got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("video clip values must lie in [0, 1]")
        self.pixels = pixels

    @property
    def frames(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def views(self) -> int:
        return int(self.pixels.shape[1])


def box_corners(center, size, yaw: float) -> np.ndarray:
    """Corners of an upright box with ``size`` = (length, width, height) rotated by ``yaw`` about z."""
    length, width, height = (float(s) for s in size)
    signs = [(1, 1), (1, -1), (-1, -1), (-1, 1)]
    local = np.array(
        [[sx * length / 2, sy * width / 2, sz * height / 2] for sz in (-1, 1) for sx, sy in signs],
        dtype=np.float64,
    )
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(center, dtype=np.float64)


def is_cuboid(corners: np.ndarray, tol: float = CUBOID_TOL) -> bool:
    """Opposite faces parallel: every corner equals c0 + combinations of the three edge vectors."""
    c = np.asarray(corners, dtype=np.float64)
    a, b, h = c[1] - c[0], c[3] - c[0], c[4] - c[0]
    expected = np.array([c[0], c[0] + a, c[0] + a + b, c[0] + b])
    expected = np.concatenate([expected, expected + h])
    scale = max(1.0, float(np.abs(c).max()))
    return bool(np.abs(expected - c).max() <= tol * scale)
