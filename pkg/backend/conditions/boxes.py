"""Box padding and the spatial-temporal box encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from backend.autodiff.nn import Embedding, MLP, Module
from backend.autodiff.tensor import Tensor, concat
from backend.conditions.temporal import BOX_MODES, TemporalTransformer, alignment_matrix, pool_tokens
from backend.scene.geometry import views_with_box
from backend.scene.records import OBJECT_CLASSES, Box3D, SceneFrame

SCENE_RADIUS_M = 50.0


@dataclass
class PaddedBoxes:
    """Dense per-frame box slots: corners (T, C, N, 8, 3), labels / track ids / mask (T, C, N)."""

    corners: np.ndarray
    labels: np.ndarray
    track_ids: np.ndarray
    mask: np.ndarray

    @property
    def slots(self) -> int:
        return int(self.mask.shape[-1])


@dataclass
class BoxTokenSeq:
    tokens: Tensor  # (B, T′, C, N, D)
    mask: np.ndarray  # (B, T′, C, N)

    @property
    def latent_frames(self) -> int:
        return int(self.tokens.shape[1])


def visible_boxes(scene: Sequence[SceneFrame]) -> List[List[List[Box3D]]]:
    """Per frame, per view lists of boxes passing the any-corner visibility rule."""
    out: List[List[List[Box3D]]] = []
    for frame in scene:
        per_view: List[List[Box3D]] = [[] for _ in frame.cameras]
        for box in frame.boxes:
            for c in views_with_box(box, frame.cameras):
                per_view[c].append(box)
        out.append(per_view)
    return out


def _assign_slots(frames: Sequence[Sequence[Box3D]]) -> List[Dict[int, int]]:
    """Slot per track id for each frame of one view.

    A track keeps its slot while visible. When it reappears it reclaims its
    previous slot if free, otherwise (and for new tracks) the lowest free slot.
    """
    current: Dict[int, int] = {}
    last: Dict[int, int] = {}
    out: List[Dict[int, int]] = []
    for boxes in frames:
        ids = sorted({int(b.track_id) for b in boxes})
        current = {tid: slot for tid, slot in current.items() if tid in ids}
        taken = set(current.values())
        waiting = [tid for tid in ids if tid not in current]
        unplaced = []
        for tid in waiting:
            slot = last.get(tid)
            if slot is not None and slot not in taken:
                current[tid] = slot
                taken.add(slot)
            else:
                unplaced.append(tid)
        for tid in unplaced:
            slot = 0
            while slot in taken:
                slot += 1
            current[tid] = slot
            taken.add(slot)
        last.update(current)
        out.append(dict(current))
    return out


def pad_boxes(raw: Sequence[Sequence[Sequence[Box3D]]], slots: int = 0) -> PaddedBoxes:
    """Pad ragged ``raw[t][c]`` box lists into stable slots.

    N_max is the largest visible count over frames and views (at least 1, or
    ``slots`` if larger). Boxes without a track id get a per-frame id from
    their list position.
    """
    frames = len(raw)
    views = len(raw[0]) if frames else 0
    counts = [len(raw[t][c]) for t in range(frames) for c in range(views)]
    n_max = max([1, slots] + counts)

    corners = np.zeros((frames, views, n_max, 8, 3))
    labels = np.zeros((frames, views, n_max), dtype=np.int64)
    track_ids = np.full((frames, views, n_max), -1, dtype=np.int64)
    mask = np.zeros((frames, views, n_max), dtype=bool)

    for c in range(views):
        per_frame = []
        for t in range(frames):
            keyed = []
            for i, box in enumerate(raw[t][c]):
                tid = int(box.track_id) if box.track_id >= 0 else 1_000_000 + i
                keyed.append(Box3D(corners=box.corners, label=box.label, track_id=tid))
            per_frame.append(keyed)
        assignment = _assign_slots(per_frame)
        for t, boxes in enumerate(per_frame):
            for box in boxes:
                slot = assignment[t][box.track_id]
                corners[t, c, slot] = box.corners
                labels[t, c, slot] = box.label
                track_ids[t, c, slot] = box.track_id
                mask[t, c, slot] = True
    return PaddedBoxes(corners=corners, labels=labels, track_ids=track_ids, mask=mask)


def pad_batch(items: Sequence[PaddedBoxes]) -> PaddedBoxes:
    """Stack samples on a leading axis, padding every sample to the widest slot count."""
    n_max = max(p.slots for p in items)

    def widen(arr: np.ndarray, fill) -> np.ndarray:
        extra = n_max - arr.shape[2]
        if extra == 0:
            return arr
        pad = [(0, 0)] * arr.ndim
        pad[2] = (0, extra)
        return np.pad(arr, pad, constant_values=fill)

    return PaddedBoxes(
        corners=np.stack([widen(p.corners, 0.0) for p in items]),
        labels=np.stack([widen(p.labels, 0) for p in items]),
        track_ids=np.stack([widen(p.track_ids, -1) for p in items]),
        mask=np.stack([widen(p.mask, False) for p in items]),
    )


def fourier_features(x: np.ndarray, frequencies: int) -> np.ndarray:
    """[x, sin(2^k π x), cos(2^k π x) for k < frequencies] along the last axis."""
    parts = [x]
    for k in range(frequencies):
        scaled = (2.0 ** k) * np.pi * x
        parts.extend([np.sin(scaled), np.cos(scaled)])
    return np.concatenate(parts, axis=-1)


class BoxEncoder(Module):
    """Fourier corner features + class embedding → perceptron → temporal transformer → alignment."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        mode: str = "downsample4x",
        frequencies: int = 4,
        class_dim: int = 8,
        scene_radius: float = SCENE_RADIUS_M,
        temporal_layers: int = 1,
        flip_window: bool = False,
    ) -> None:
        if mode not in BOX_MODES:
            raise ValueError(f"unknown box encoder mode '{mode}'; expected one of {BOX_MODES}")
        self.mode = mode
        self.frequencies = frequencies
        self.scene_radius = scene_radius
        self.flip_window = flip_window
        feature_dim = 24 * (2 * frequencies + 1)
        self.classes = Embedding(len(OBJECT_CLASSES), class_dim, rng, std=0.5)
        self.mlp = MLP(feature_dim + class_dim, dim, dim, rng)
        self.temporal = TemporalTransformer(dim, heads, rng, layers=temporal_layers)

    def embed(self, corners: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> Tensor:
        """Per-frame box embeddings (B, T, C, N, D); masked slots are exactly zero."""
        flat = np.asarray(corners, dtype=np.float64).reshape(corners.shape[:-2] + (24,)) / self.scene_radius
        feats = fourier_features(flat, self.frequencies)
        keep = np.asarray(mask, dtype=bool)
        feats = np.where(keep[..., None], feats, 0.0)
        safe_labels = np.where(keep, labels, 0)
        tokens = self.mlp(concat([Tensor(feats), self.classes(safe_labels)], axis=-1))
        return tokens * keep[..., None].astype(np.float64)

    def forward(self, padded: PaddedBoxes) -> BoxTokenSeq:
        """``padded`` carries a leading batch axis: corners (B, T, C, N, 8, 3)."""
        mask = np.asarray(padded.mask, dtype=bool)
        tokens = self.embed(padded.corners, padded.labels, mask)
        tokens = self.temporal(tokens, mask)
        matrix = alignment_matrix(mask.shape[1], self.mode, flip_window=self.flip_window)
        pooled, pooled_mask = pool_tokens(tokens, matrix, mask)
        return BoxTokenSeq(tokens=pooled, mask=pooled_mask)
