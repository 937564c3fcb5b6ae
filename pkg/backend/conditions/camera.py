"""One token per camera view from intrinsics and extrinsics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from backend.autodiff.nn import MLP, Module
from backend.autodiff.tensor import Tensor
from backend.scene.geometry import check_rotation
from backend.scene.records import CameraPose

CAMERA_DIM = 16


def camera_vectors(cameras: Sequence[CameraPose]) -> np.ndarray:
    for c, cam in enumerate(cameras):
        check_rotation(cam.rotation, f"camera {c} rotation")
    return np.stack([cam.to_vector() for cam in cameras])


class CameraEncoder(Module):
    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.mlp = MLP(CAMERA_DIM, dim, dim, rng)

    def forward(self, vectors: np.ndarray) -> Tensor:
        """``vectors``: (B, C, 16) → tokens (B, 1, C, 1, D)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        tokens = self.mlp(Tensor(vectors))
        return tokens.reshape((vectors.shape[0], 1, vectors.shape[1], 1, tokens.shape[-1]))
