"""Deterministic ground-truth renderer.

Background pixels take the map layer under their ground-plane hit (low
intensities, at most ``BACKGROUND_MAX``). Visible boxes fill their projected
convex hull at a class intensity of at least ``BACKGROUND_MAX + BOX_MARGIN``,
painted far to near. The weather and time tokens add a global brightness shift
before clipping to [0, 1].
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay

try:
    from scipy.spatial import QhullError
except ImportError:  # pragma: no cover - older scipy
    from scipy.spatial.qhull import QhullError  # type: ignore

from backend.scene.geometry import ground_hits, project_box
from backend.scene.records import Box3D, CameraPose, SceneFrame, VideoClip

SKY = 0.05
ROAD_INTENSITY = {"drivable": 0.15, "walkway": 0.22, "crosswalk": 0.28, "lane_divider": 0.35}
CLASS_INTENSITY = (0.6, 0.75, 0.9)
BACKGROUND_MAX = 0.35
BOX_MARGIN = 0.25
BRIGHTNESS_SHIFT = {"sunny": 0.05, "cloudy": 0.0, "rainy": -0.03, "day": 0.0, "night": -0.02}
PAINT_ORDER = (("drivable", 0), ("walkway", 3), ("crosswalk", 2), ("lane_divider", 1))


def _background(frame: SceneFrame, camera: CameraPose) -> np.ndarray:
    points, hit = ground_hits(camera)
    grid = frame.map.grid
    rows, cols = frame.map.cells
    m = frame.map.meters_per_cell
    i = np.floor(points[..., 0] / m + rows / 2.0).astype(np.int64)
    j = np.floor(points[..., 1] / m + cols / 2.0).astype(np.int64)
    on_map = hit & (i >= 0) & (i < rows) & (j >= 0) & (j < cols)
    out = np.full(hit.shape, SKY)
    out[hit] = 0.1
    ii, jj = np.clip(i, 0, rows - 1), np.clip(j, 0, cols - 1)
    for name, idx in PAINT_ORDER:
        layer = on_map & (grid[ii, jj, idx] > 0)
        out[layer] = ROAD_INTENSITY[name]
    return out


def box_pixel_mask(box: Box3D, camera: CameraPose) -> np.ndarray:
    """Pixel centres inside the convex hull of the corners in front of the camera."""
    k = camera.intrinsics
    mask = np.zeros((k.height, k.width), dtype=bool)
    proj = project_box(box, camera)
    if not proj.visible:
        return mask
    pts = proj.corners[proj.in_front]
    if len(pts) < 3:
        return mask
    try:
        hull = Delaunay(pts)
    except QhullError:
        return mask
    lo = np.floor(pts.min(axis=0)).astype(int)
    hi = np.ceil(pts.max(axis=0)).astype(int)
    u0, u1 = max(lo[0], 0), min(hi[0] + 1, k.width)
    v0, v1 = max(lo[1], 0), min(hi[1] + 1, k.height)
    if u0 >= u1 or v0 >= v1:
        return mask
    vv, uu = np.meshgrid(np.arange(v0, v1) + 0.5, np.arange(u0, u1) + 0.5, indexing="ij")
    inside = hull.find_simplex(np.stack([uu.ravel(), vv.ravel()], axis=1)) >= 0
    mask[v0:v1, u0:u1] = inside.reshape(vv.shape)
    return mask


def brightness_shift(tokens: Sequence[str]) -> float:
    return float(sum(BRIGHTNESS_SHIFT.get(tok, 0.0) for tok in tokens))


def render_frame(frame: SceneFrame, view: int) -> np.ndarray:
    """(H, W, 3) unit-scaled image of one descriptor from camera ``view``."""
    camera = frame.cameras[view]
    gray = _background(frame, camera)
    order = sorted(
        frame.boxes,
        key=lambda b: -float(((b.center - camera.translation) @ camera.rotation)[2]),
    )
    for box in order:
        mask = box_pixel_mask(box, camera)
        gray[mask] = CLASS_INTENSITY[box.label]
    gray = gray + brightness_shift(frame.text.tokens)
    return np.repeat(np.clip(gray, 0.0, 1.0)[..., None], 3, axis=-1)


def rasterize(scene: Sequence[SceneFrame], view: int) -> np.ndarray:
    """(T, H, W, 3) frames of ``scene`` seen from ``view``."""
    if not scene:
        raise ValueError("rasterize: empty scene")
    if not 0 <= view < len(scene[0].cameras):
        raise ValueError(f"rasterize: view {view} outside [0, {len(scene[0].cameras)})")
    return np.stack([render_frame(frame, view) for frame in scene], axis=0)


def render_clip(scene: Sequence[SceneFrame], views: Optional[List[int]] = None, fps: float = 12.0) -> VideoClip:
    views = list(range(len(scene[0].cameras))) if views is None else list(views)
    return VideoClip(pixels=np.stack([rasterize(scene, v) for v in views], axis=1), fps=fps)
