"""Artifact I/O: tensor dumps, latent dumps, checkpoints, frame images, manifests and JSONL logs.

Tensor dump ("TNS1"): magic ``b"TNS1"``, rank as little-endian uint32, each axis
length as little-endian uint64, then the values as little-endian float64 in
row-major order.

Latent dump ("LAT1"): magic ``b"LAT1"``, five little-endian uint32 fields
(T, H, W, d, f), then a TNS1 dump of the (T′, C, h′, w′, d) values.

Checkpoint ("CKP1"): magic ``b"CKP1"``, uint32 length + UTF-8 JSON metadata,
uint32 entry count, then per entry uint32 name length, UTF-8 name and a TNS1
dump. Parameter names are the dotted module paths, optimizer moments are
stored as ``optim/m.<name>`` / ``optim/v.<name>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import yaml

from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("services.storage")

TENSOR_MAGIC = b"TNS1"
LATENT_MAGIC = b"LAT1"
CHECKPOINT_MAGIC = b"CKP1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable checkpoint, version mismatch or incompatible parameter table."""


# Tensor dumps


def write_tensor(stream, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    for n in arr.shape:
        stream.write(struct.pack("<Q", n))
    stream.write(arr.tobytes(order="C"))


def read_tensor(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = tuple(struct.unpack("<Q", stream.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    raw = stream.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated tensor dump")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


# Latents


def latent_to_bytes(values: np.ndarray, frames: int, height: int, width: int, channels: int, temporal_ratio: int) -> bytes:
    buf = io.BytesIO()
    buf.write(LATENT_MAGIC)
    buf.write(struct.pack("<5I", frames, height, width, channels, temporal_ratio))
    write_tensor(buf, values)
    return buf.getvalue()


def latent_from_bytes(data: bytes) -> Tuple[np.ndarray, Dict[str, int]]:
    buf = io.BytesIO(data)
    if buf.read(4) != LATENT_MAGIC:
        raise ValueError("bad latent magic")
    frames, height, width, channels, ratio = struct.unpack("<5I", buf.read(20))
    header = {"frames": frames, "height": height, "width": width, "channels": channels, "temporal_ratio": ratio}
    return read_tensor(buf), header


# Output directory


class OutputDir:
    """Resolves artifact paths and refuses any path that escapes the root."""

    def __init__(self, root: str) -> None:
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()

    def path(self, *parts: str) -> Path:
        target = self.root.joinpath(*parts).resolve()
        if target != self.root and self.root not in target.parents:
            raise PermissionError(f"refusing to write outside output directory: {target}")
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    @contextmanager
    def _atomic(self, target: Path, mode: str):
        with self._lock:
            tmp = target.with_name(target.name + ".tmp")
            kwargs = {"encoding": "utf-8"} if "b" not in mode else {}
            with open(tmp, mode, **kwargs) as f:
                yield f
            os.replace(tmp, target)

    def write_bytes(self, data: bytes, *parts: str) -> Path:
        target = self.path(*parts)
        with self._atomic(target, "wb") as f:
            f.write(data)
        return target

    def write_yaml(self, payload: Any, *parts: str) -> Path:
        target = self.path(*parts)
        with self._atomic(target, "w") as f:
            yaml.safe_dump(payload, f, sort_keys=False)
        return target

    def append_jsonl(self, record: Dict[str, Any], *parts: str) -> Path:
        return self.extend_jsonl([record], *parts)

    def extend_jsonl(self, records: Iterable[Dict[str, Any]], *parts: str) -> Path:
        target = self.path(*parts)
        with self._lock:
            with open(target, "a", encoding="utf-8") as f:
                for record in records:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
        return target

    def write_jsonl(self, records: Iterable[Dict[str, Any]], *parts: str) -> Path:
        target = self.path(*parts)
        with self._atomic(target, "w") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return target


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# Frame images


def ppm_bytes(frame: np.ndarray) -> bytes:
    """Binary PPM (P6, maxval 255) from an (H, W, 3) unit-scaled frame; values are clipped."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) frame, got {img.shape}")
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + quantized.tobytes(order="C")


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


# Checkpoints


def checkpoint_bytes(meta: Dict[str, Any], entries: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    blob = json.dumps({"version": CHECKPOINT_VERSION, **meta}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(entries)))
    for name in entries:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        write_tensor(buf, entries[name])
    return buf.getvalue()


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as error:
        raise CheckpointError(f"cannot read checkpoint {path}: {error}") from error
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    try:
        (size,) = struct.unpack("<I", buf.read(4))
        meta = json.loads(buf.read(size).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        (count,) = struct.unpack("<I", buf.read(4))
        entries: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", buf.read(4))
            name = buf.read(n).decode("utf-8")
            entries[name] = read_tensor(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as error:
        raise CheckpointError(f"corrupt checkpoint {path}: {error}") from error
    LOGGER.debug("Loaded checkpoint {} ({} entries)", path, count)
    return meta, entries


def split_checkpoint(entries: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    params = {k: v for k, v in entries.items() if not k.startswith("optim/")}
    optim = {k[len("optim/"):]: v for k, v in entries.items() if k.startswith("optim/")}
    return params, optim


def merge_checkpoint(params: Dict[str, np.ndarray], optim: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    merged = dict(params)
    for k, v in (optim or {}).items():
        merged[f"optim/{k}"] = v
    return merged
