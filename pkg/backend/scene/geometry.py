"""Rigid transforms, camera rigs and pinhole projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from backend.scene.records import Box3D, CameraPose, EgoTransform, GeometryError, Intrinsics, is_cuboid

ORTHO_TOL = 1e-9
NEAR_PLANE = 1e-6
CAMERA_HEIGHT_M = 1.6


def check_rotation(rotation: np.ndarray, what: str = "rotation") -> None:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"{what}: expected a 3x3 matrix, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
        raise GeometryError(f"{what}: matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise GeometryError(f"{what}: determinant must be +1")


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_ego_transform(box: Box3D, transform: EgoTransform) -> Box3D:
    """Map box corners by ``R x + t``; labels and track ids are kept."""
    check_rotation(transform.rotation, "ego transform")
    corners = box.corners @ transform.rotation.T + transform.translation
    if not is_cuboid(corners):
        raise GeometryError("transformed box is no longer a cuboid")
    return Box3D(corners=corners, label=box.label, track_id=box.track_id)


def compose(outer: EgoTransform, inner: EgoTransform) -> EgoTransform:
    """``outer ∘ inner``: apply ``inner`` first."""
    return EgoTransform(
        rotation=outer.rotation @ inner.rotation,
        translation=outer.rotation @ inner.translation + outer.translation,
    )


def invert(transform: EgoTransform) -> EgoTransform:
    check_rotation(transform.rotation, "ego transform")
    rot_t = transform.rotation.T
    return EgoTransform(rotation=rot_t, translation=-rot_t @ transform.translation)


def transform_points(points: np.ndarray, transform: EgoTransform) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ transform.rotation.T + transform.translation


# Cameras


def camera_rotation(yaw: float) -> np.ndarray:
    """Camera → ego rotation for a level camera looking along ``yaw``; columns are right, down, forward."""
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    return np.stack([right, down, forward], axis=1)


def make_intrinsics(width: int, height: int, fov_deg: float = 90.0) -> Intrinsics:
    focal = float((width / 2.0) / np.tan(np.radians(fov_deg) / 2.0))
    return Intrinsics(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=int(width), height=int(height))


def camera_ring(views: int, width: int, height: int, fov_deg: float = 90.0, mount_height: float = CAMERA_HEIGHT_M) -> List[CameraPose]:
    """``views`` cameras at the ego origin, evenly spaced in yaw starting straight ahead."""
    intrinsics = make_intrinsics(width, height, fov_deg)
    cameras = []
    for c in range(views):
        yaw = 2.0 * np.pi * c / views
        cameras.append(
            CameraPose(
                rotation=camera_rotation(yaw),
                translation=np.array([0.0, 0.0, mount_height]),
                intrinsics=intrinsics,
                name=f"cam{c}",
            )
        )
    return cameras


def ego_to_camera(points: np.ndarray, camera: CameraPose) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - camera.translation) @ camera.rotation


def project_points(points: np.ndarray, camera: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2) and depths (N,); points at or behind the camera get NaN pixels."""
    cam = ego_to_camera(points, camera)
    depth = cam[:, 2]
    k = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(depth > NEAR_PLANE, depth, np.nan)
        u = k.fx * cam[:, 0] / safe + k.cx
        v = k.fy * cam[:, 1] / safe + k.cy
    return np.stack([u, v], axis=1), depth


@dataclass
class ProjectedBox:
    corners: np.ndarray
    depths: np.ndarray
    visible: bool

    @property
    def in_front(self) -> np.ndarray:
        return self.depths > NEAR_PLANE


def project_box(box: Box3D, camera: CameraPose) -> ProjectedBox:
    """Any-corner rule: visible iff some corner has positive depth and lands inside the image."""
    check_rotation(camera.rotation, "camera rotation")
    uv, depth = project_points(box.corners, camera)
    k = camera.intrinsics
    front = depth > NEAR_PLANE
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    return ProjectedBox(corners=uv, depths=depth, visible=bool(inside.any()))


def pixel_rays(camera: CameraPose) -> np.ndarray:
    """Unit ray directions in the ego frame through every pixel centre, (H, W, 3)."""
    k = camera.intrinsics
    v, u = np.meshgrid(np.arange(k.height) + 0.5, np.arange(k.width) + 0.5, indexing="ij")
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    rays = cam @ camera.rotation.T
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def ground_hits(camera: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-plane (z = 0) intersection per pixel in the ego frame and a hit mask."""
    rays = pixel_rays(camera)
    origin = camera.translation
    dz = rays[..., 2]
    hit = dz < -1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(hit, -origin[2] / dz, 0.0)
    points = origin + rays * s[..., None]
    return points, hit


def views_with_box(box: Box3D, cameras: Sequence[CameraPose]) -> List[int]:
    """Indices of the cameras that see ``box``."""
    return [c for c, cam in enumerate(cameras) if project_box(box, cam).visible]
