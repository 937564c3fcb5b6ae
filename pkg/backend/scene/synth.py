"""Procedural driving scenes.

The world frame is the ego frame at t = 0. The road centreline follows
``y = lane_offset + curvature * x^2 / 2``; the ego drives the right-hand lane
(``y = curvature * x^2 / 2``) so its transform at t = 0 is exactly the identity.
Objects move on two-segment piecewise-linear tracks in the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from backend.codec.latent import latent_frame_count
from backend.scene.geometry import camera_ring, invert, transform_points, yaw_rotation
from backend.scene.records import (
    DEFAULT_FPS,
    OBJECT_CLASSES,
    TIME_TOKENS,
    WEATHER_TOKENS,
    Box3D,
    EgoTransform,
    RoadMapRaster,
    SceneFrame,
    TextPrompt,
    box_corners,
)
from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("scene.synth")

CLASS_SIZES = {
    0: (4.5, 1.9, 1.6),  # car
    1: (0.6, 0.6, 1.8),  # pedestrian
    2: (1.8, 0.6, 1.6),  # cyclist
}
LANE_WIDTH_M = 3.5


@dataclass
class SynthSpec:
    """Difficulty knobs for ``synth_scene``."""

    min_boxes: int = 1
    max_boxes: int = 3
    image_height: int = 32
    image_width: int = 56
    fov_deg: float = 90.0
    map_cells: Tuple[int, int] = (32, 56)
    meters_per_cell: float = 1.0
    max_curvature: float = 0.004
    ego_speed: Tuple[float, float] = (3.0, 8.0)
    object_speed: float = 3.0
    object_distance: Tuple[float, float] = (6.0, 18.0)
    fps: float = DEFAULT_FPS
    classes: Tuple[int, ...] = field(default_factory=lambda: tuple(range(len(OBJECT_CLASSES))))

    def __post_init__(self) -> None:
        if not 0 <= self.min_boxes <= self.max_boxes:
            raise ValueError(f"box bounds must satisfy 0 <= min <= max, got {self.min_boxes}..{self.max_boxes}")
        self.map_cells = tuple(int(n) for n in self.map_cells)
        self.ego_speed = tuple(float(v) for v in self.ego_speed)
        self.object_distance = tuple(float(v) for v in self.object_distance)
        self.classes = tuple(int(c) for c in self.classes)


@dataclass
class _Track:
    track_id: int
    label: int
    start: np.ndarray
    velocities: Tuple[np.ndarray, np.ndarray]
    switch_frame: int
    yaw: float

    def position(self, frame: int) -> np.ndarray:
        first = min(frame, self.switch_frame)
        second = max(0, frame - self.switch_frame)
        return self.start + self.velocities[0] * first + self.velocities[1] * second


def road_layers(points: np.ndarray, curvature: float) -> np.ndarray:
    """Map channel membership (..., 4) for world-frame ground points."""
    x, y = points[..., 0], points[..., 1]
    centre = LANE_WIDTH_M / 2.0 + curvature * x * x / 2.0
    offset = np.abs(y - centre)
    drivable = offset <= LANE_WIDTH_M
    divider = offset <= 0.25
    crosswalk = drivable & (np.mod(x, 40.0) >= 20.0) & (np.mod(x, 40.0) < 24.0)
    walkway = (offset > LANE_WIDTH_M) & (offset <= LANE_WIDTH_M + 2.5)
    return np.stack([drivable, divider, crosswalk, walkway], axis=-1).astype(np.uint8)


def ego_path(frames: int, speed: float, curvature: float, fps: float) -> List[EgoTransform]:
    out = []
    for t in range(frames):
        x = speed * t / fps
        y = curvature * x * x / 2.0
        out.append(EgoTransform(rotation=yaw_rotation(np.arctan(curvature * x)), translation=np.array([x, y, 0.0])))
    return out


def _map_raster(ego: EgoTransform, curvature: float, spec: SynthSpec) -> RoadMapRaster:
    rows, cols = spec.map_cells
    m = spec.meters_per_cell
    xs = (np.arange(rows) - rows / 2.0 + 0.5) * m
    ys = (np.arange(cols) - cols / 2.0 + 0.5) * m
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    local = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    world = transform_points(local.reshape(-1, 3), ego).reshape(rows, cols, 3)
    return RoadMapRaster(grid=road_layers(world, curvature), meters_per_cell=m)


def _spawn_tracks(rng: np.random.Generator, frames: int, views: int, spec: SynthSpec) -> List[_Track]:
    count = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
    half_fov = np.radians(spec.fov_deg) / 2.0
    tracks = []
    for i in range(count):
        label = int(rng.choice(spec.classes))
        view = int(rng.integers(views))
        bearing = 2.0 * np.pi * view / views + rng.uniform(-0.6, 0.6) * half_fov
        distance = rng.uniform(*spec.object_distance)
        start = np.array([distance * np.cos(bearing), distance * np.sin(bearing), CLASS_SIZES[label][2] / 2.0])
        heading = rng.uniform(0.0, 2.0 * np.pi)
        v0 = spec.object_speed / spec.fps * np.array([np.cos(heading), np.sin(heading), 0.0])
        turn = heading + rng.uniform(-1.0, 1.0)
        v1 = spec.object_speed / spec.fps * np.array([np.cos(turn), np.sin(turn), 0.0])
        switch = int(rng.integers(0, frames)) if frames > 1 else 0
        tracks.append(_Track(track_id=i, label=label, start=start, velocities=(v0, v1), switch_frame=switch, yaw=heading))
    return tracks


def synth_scene(seed: int, frames: int, views: int, spec: Optional[SynthSpec] = None) -> List[SceneFrame]:
    """Deterministic scene of ``frames`` descriptors seen by ``views`` cameras."""
    spec = spec or SynthSpec()
    latent_frame_count(frames)
    if views < 1:
        raise ValueError(f"views must be >= 1, got {views}")
    rng = np.random.default_rng(seed)

    curvature = float(rng.uniform(-spec.max_curvature, spec.max_curvature))
    speed = float(rng.uniform(*spec.ego_speed))
    weather = str(rng.choice(WEATHER_TOKENS))
    time_of_day = str(rng.choice(TIME_TOKENS))
    text = TextPrompt((weather, time_of_day))

    cameras = camera_ring(views, spec.image_width, spec.image_height, spec.fov_deg)
    egos = ego_path(frames, speed, curvature, spec.fps)
    tracks = _spawn_tracks(rng, frames, views, spec)

    scene = []
    for t, ego in enumerate(egos):
        to_local = invert(ego)
        boxes = []
        for track in tracks:
            world = box_corners(track.position(t), CLASS_SIZES[track.label], track.yaw)
            boxes.append(Box3D(corners=transform_points(world, to_local), label=track.label, track_id=track.track_id))
        scene.append(
            SceneFrame(
                cameras=cameras,
                map=_map_raster(ego, curvature, spec),
                boxes=boxes,
                text=text,
                ego=ego,
            )
        )
    LOGGER.debug("synth scene seed={} T={} views={} boxes={}", seed, frames, views, len(tracks))
    return scene


def scripted_scene(
    frames: int,
    views: int,
    start: Tuple[float, float],
    velocity: Tuple[float, float],
    label: int = 0,
    spec: Optional[SynthSpec] = None,
    text: Tuple[str, ...] = ("sunny", "day"),
) -> List[SceneFrame]:
    """Static ego, straight road and a single box on a constant-velocity track (meters, meters/frame)."""
    spec = spec or SynthSpec()
    latent_frame_count(frames)
    cameras = camera_ring(views, spec.image_width, spec.image_height, spec.fov_deg)
    ego = EgoTransform.identity()
    road = _map_raster(ego, 0.0, spec)
    size = CLASS_SIZES[label]
    scene = []
    for t in range(frames):
        centre = (start[0] + velocity[0] * t, start[1] + velocity[1] * t, size[2] / 2.0)
        box = Box3D(corners=box_corners(centre, size, 0.0), label=label, track_id=0)
        scene.append(SceneFrame(cameras=cameras, map=road, boxes=[box], text=TextPrompt(tuple(text)), ego=ego))
    return scene

