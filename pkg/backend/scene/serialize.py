"""Scene documents: one YAML file per clip.

Schema (version 1)::

    version: 1
    fps: 12.0
    cameras:            # fixed for the clip, per-view intrinsics allowed
      - {name, rotation: 3x3, translation: [x, y, z],
         intrinsics: {fx, fy, cx, cy, width, height}}
    frames:
      - ego: {rotation: 3x3, translation: [x, y, z]}
        text: [tokens...]
        boxes: [{label, track_id, corners: 8x3}]
        map: {cells: [w, h], meters_per_cell, runs: {<channel>: [n0, n1, ...]}}

Map runs are run lengths over the row-major flattened channel, alternating
0-runs and 1-runs and starting with a (possibly empty) 0-run.
"""

from __future__ import annotations

from typing import Any, Dict, List, Sequence

import numpy as np
import yaml

from backend.scene.records import (
    DEFAULT_FPS,
    MAP_CHANNELS,
    Box3D,
    CameraPose,
    EgoTransform,
    Intrinsics,
    RoadMapRaster,
    SceneFrame,
    TextPrompt,
)
from backend.services.utils import stable_hash

SCENE_VERSION = 1


def rle_encode(bits: np.ndarray) -> List[int]:
    flat = np.asarray(bits, dtype=np.uint8).reshape(-1)
    runs: List[int] = []
    current, count = 0, 0
    for value in flat:
        if value == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(value), 1
    runs.append(count)
    return runs


def rle_decode(runs: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.uint8)
    pos, value = 0, 0
    for n in runs:
        out[pos : pos + int(n)] = value
        pos += int(n)
        value ^= 1
    if pos != size:
        raise ValueError(f"run lengths cover {pos} cells, expected {size}")
    return out


def _camera_doc(cam: CameraPose) -> Dict[str, Any]:
    k = cam.intrinsics
    return {
        "name": cam.name,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
        "intrinsics": {"fx": float(k.fx), "fy": float(k.fy), "cx": float(k.cx), "cy": float(k.cy), "width": int(k.width), "height": int(k.height)},
    }


def _map_doc(raster: RoadMapRaster) -> Dict[str, Any]:
    return {
        "cells": list(raster.cells),
        "meters_per_cell": float(raster.meters_per_cell),
        "runs": {name: rle_encode(raster.grid[..., c]) for c, name in enumerate(MAP_CHANNELS)},
    }


def scene_to_document(scene: Sequence[SceneFrame], fps: float = DEFAULT_FPS) -> Dict[str, Any]:
    if not scene:
        raise ValueError("cannot serialize an empty scene")
    return {
        "version": SCENE_VERSION,
        "fps": float(fps),
        "cameras": [_camera_doc(cam) for cam in scene[0].cameras],
        "frames": [
            {
                "ego": {"rotation": f.ego.rotation.tolist(), "translation": f.ego.translation.tolist()},
                "text": list(f.text.tokens),
                "boxes": [{"label": int(b.label), "track_id": int(b.track_id), "corners": b.corners.tolist()} for b in f.boxes],
                "map": _map_doc(f.map),
            }
            for f in scene
        ],
    }


def scene_from_document(doc: Dict[str, Any]) -> List[SceneFrame]:
    if doc.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene document version {doc.get('version')!r}")
    cameras = [
        CameraPose(
            rotation=np.array(c["rotation"]),
            translation=np.array(c["translation"]),
            intrinsics=Intrinsics(**c["intrinsics"]),
            name=c.get("name", ""),
        )
        for c in doc["cameras"]
    ]
    frames = []
    for f in doc["frames"]:
        rows, cols = f["map"]["cells"]
        layers = [rle_decode(f["map"]["runs"][name], rows * cols).reshape(rows, cols) for name in MAP_CHANNELS]
        frames.append(
            SceneFrame(
                cameras=cameras,
                map=RoadMapRaster(grid=np.stack(layers, axis=-1), meters_per_cell=f["map"]["meters_per_cell"]),
                boxes=[Box3D(corners=np.array(b["corners"]), label=b["label"], track_id=b.get("track_id", -1)) for b in f["boxes"]],
                text=TextPrompt(tuple(f.get("text", ()))),
                ego=EgoTransform(rotation=np.array(f["ego"]["rotation"]), translation=np.array(f["ego"]["translation"])),
            )
        )
    return frames


def dump_scene(scene: Sequence[SceneFrame], path: str, fps: float = DEFAULT_FPS) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(scene_to_document(scene, fps), f, sort_keys=False)


def load_scene(path: str) -> List[SceneFrame]:
    with open(path, "r", encoding="utf-8") as f:
        return scene_from_document(yaml.safe_load(f))


def scene_hash(scene: Sequence[SceneFrame]) -> str:
    return stable_hash(scene_to_document(scene))
