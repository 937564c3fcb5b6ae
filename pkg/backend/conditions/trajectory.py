"""Ego trajectory tokens, shared by every view."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from backend.autodiff.nn import MLP, Module
from backend.autodiff.tensor import Tensor
from backend.conditions.temporal import TemporalTransformer, alignment_matrix, pool_tokens
from backend.scene.geometry import check_rotation
from backend.scene.records import EgoTransform, GeometryError

POSE_DIM = 12


def pose_vectors(egos: Sequence[EgoTransform]) -> np.ndarray:
    """(T, 12) flattened rigid transforms; the first must be the identity."""
    if not egos:
        raise GeometryError("trajectory is empty")
    if not egos[0].is_identity(tol=1e-9):
        raise GeometryError("trajectory must start at the identity transform")
    for t, ego in enumerate(egos):
        check_rotation(ego.rotation, f"ego transform at frame {t}")
    return np.stack([ego.to_vector() for ego in egos])


class TrajectoryEncoder(Module):
    """Pose perceptron, then the box encoder's temporal machinery in downsample4x mode."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        identity_init: bool = False,
        temporal_layers: int = 1,
        flip_window: bool = False,
    ) -> None:
        self.flip_window = flip_window
        self.mlp = MLP(POSE_DIM, dim, dim, rng, identity_init=identity_init)
        self.temporal = TemporalTransformer(dim, heads, rng, layers=temporal_layers)

    def forward(self, poses: np.ndarray) -> Tensor:
        """``poses``: (B, T, 12) → tokens (B, T′, 1, D)."""
        poses = np.asarray(poses, dtype=np.float64)
        if poses.ndim != 3 or poses.shape[-1] != POSE_DIM:
            raise GeometryError(f"expected (B, T, {POSE_DIM}) pose vectors, got {poses.shape}")
        tokens = self.mlp(Tensor(poses[:, :, None, :]))
        tokens = self.temporal(tokens)
        pooled, _ = pool_tokens(tokens, alignment_matrix(poses.shape[1], "downsample4x", flip_window=self.flip_window))
        return pooled
