"""Fixed orthonormal spatio-temporal codec with 3D-VAE shape contracts.

Frame counts: T = 1 → 1 latent frame, 8n → 2n, 8n+1 → 2n+1. For odd T the first
frame is coded alone and the rest in non-overlapping windows of four; for
T = 8n every window has four frames.

Each window is cut into 8x8 spatial blocks and transformed with an orthonormal
DCT over (time, y, x, colour). Coefficients are ordered by total frequency so
channel 0 is the DC term; the first ``latent_channels`` are kept (zero-padded
if there are fewer). With ``latent_channels >= 4 * 8 * 8 * 3`` the codec is an
exact orthonormal map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from einops import rearrange
from scipy.fft import dctn, idctn

from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("codec.latent")

PSNR_CAP_DB = 300.0
PIXEL_CHANNELS = 3


class CodecError(ValueError):
    """Inadmissible frame count, spatial size or latent layout."""


@dataclass(frozen=True)
class CodecSpec:
    temporal_ratio: int = 4
    spatial_ratio: int = 8
    latent_channels: int = 16

    def __post_init__(self) -> None:
        if self.temporal_ratio * self.spatial_ratio ** 2 != 256:
            raise CodecError(
                f"temporal_ratio * spatial_ratio^2 must be 256, got {self.temporal_ratio}*{self.spatial_ratio}^2"
            )
        if self.latent_channels < 1:
            raise CodecError("latent_channels must be >= 1")

    @property
    def block_rank(self) -> int:
        """Coefficients per latent cell for a full temporal window."""
        return self.temporal_ratio * self.spatial_ratio ** 2 * PIXEL_CHANNELS

    @property
    def full_rank(self) -> bool:
        return self.latent_channels >= self.block_rank


@dataclass
class LatentTensor:
    """Latent values laid out (T′, C, h′, w′, d) plus the clip length they came from."""

    values: np.ndarray
    frames: int
    spec: CodecSpec = field(default_factory=CodecSpec)

    @property
    def latent_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def views(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)


def latent_frame_count(frames: int) -> int:
    """1 → 1, 8n → 2n, 8n+1 → 2n+1; anything else raises ``CodecError``."""
    t = int(frames)
    if t == 1:
        return 1
    if t >= 8 and t % 8 == 0:
        return t // 4
    if t >= 9 and t % 8 == 1:
        return (t - 1) // 4 + 1
    raise CodecError(f"unsupported frame count {frames}: admissible forms are 1, 8n or 8n+1 (n >= 1)")


def is_admissible(frames: int) -> bool:
    try:
        latent_frame_count(frames)
        return True
    except CodecError:
        return False


def frame_count_for(latent_frames: int) -> int:
    """Preimage of ``latent_frame_count``; odd counts resolve to the 8n+1 form."""
    k = int(latent_frames)
    if k < 1:
        raise CodecError(f"latent frame count must be >= 1, got {latent_frames}")
    if k == 1:
        return 1
    if k % 2:
        return 4 * (k - 1) + 1
    return 4 * k


def temporal_windows(frames: int, temporal_ratio: int = 4) -> List[Tuple[int, int]]:
    """Half-open frame ranges mapped to each latent frame."""
    latent_frame_count(frames)
    windows: List[Tuple[int, int]] = []
    start = 0
    if frames % 2:
        windows.append((0, 1))
        start = 1
    for a in range(start, frames, temporal_ratio):
        windows.append((a, a + temporal_ratio))
    return windows


def latent_shape(frames: int, views: int, height: int, width: int, spec: CodecSpec = CodecSpec()) -> Tuple[int, int, int, int, int]:
    _check_spatial(height, width, spec)
    return (latent_frame_count(frames), views, height // spec.spatial_ratio, width // spec.spatial_ratio, spec.latent_channels)


def _check_spatial(height: int, width: int, spec: CodecSpec) -> None:
    s = spec.spatial_ratio
    if height % s or width % s:
        raise CodecError(f"spatial size {height}x{width} is not divisible by {s}")


def _channel_order(spec: CodecSpec) -> np.ndarray:
    """Flat (kt, ky, kx, kc) coefficient indices sorted by total frequency."""
    f, s = spec.temporal_ratio, spec.spatial_ratio
    grid = np.stack(np.meshgrid(np.arange(f), np.arange(s), np.arange(s), np.arange(PIXEL_CHANNELS), indexing="ij"), -1)
    grid = grid.reshape(-1, 4)
    keys = (grid[:, 3], grid[:, 2], grid[:, 1], grid[:, 0], grid.sum(axis=1))
    return np.lexsort(keys)


class ToyCodec:
    """Stateless after construction; ``encode`` may run views on a thread pool."""

    def __init__(self, spec: CodecSpec = CodecSpec()) -> None:
        self.spec = spec
        self.order = _channel_order(spec)
        self.kept = min(spec.latent_channels, spec.block_rank)

    # Encoding

    def encode(self, pixels: np.ndarray, workers: int = 1) -> LatentTensor:
        """(T, C, H, W, 3) pixels → latent (T′, C, H/8, W/8, d)."""
        video = np.asarray(pixels, dtype=np.float64)
        if video.ndim != 5 or video.shape[-1] != PIXEL_CHANNELS:
            raise CodecError(f"expected (T, C, H, W, {PIXEL_CHANNELS}) pixels, got {video.shape}")
        frames, views, height, width, _ = video.shape
        _check_spatial(height, width, self.spec)
        windows = temporal_windows(frames, self.spec.temporal_ratio)

        if workers > 1 and views > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                per_view = list(pool.map(lambda c: self._encode_view(video[:, c], windows), range(views)))
        else:
            per_view = [self._encode_view(video[:, c], windows) for c in range(views)]
        values = np.stack(per_view, axis=1)
        LOGGER.debug("encoded clip {} -> latent {}", video.shape, values.shape)
        return LatentTensor(values=values, frames=frames, spec=self.spec)

    def _encode_view(self, view: np.ndarray, windows: List[Tuple[int, int]]) -> np.ndarray:
        s, f = self.spec.spatial_ratio, self.spec.temporal_ratio
        out = []
        for a, b in windows:
            blocks = rearrange(view[a:b], "l (h p) (w q) k -> h w l p q k", p=s, q=s)
            coeffs = dctn(blocks, axes=(2, 3, 4, 5), norm="ortho")
            if b - a < f:
                padded = np.zeros(coeffs.shape[:2] + (f,) + coeffs.shape[3:])
                padded[:, :, : b - a] = coeffs
                coeffs = padded
            flat = coeffs.reshape(coeffs.shape[:2] + (-1,))[..., self.order[: self.kept]]
            out.append(self._fit_channels(flat))
        return np.stack(out, axis=0)

    def _fit_channels(self, flat: np.ndarray) -> np.ndarray:
        d = self.spec.latent_channels
        if flat.shape[-1] == d:
            return flat
        padded = np.zeros(flat.shape[:-1] + (d,))
        padded[..., : flat.shape[-1]] = flat
        return padded

    # Decoding

    def decode(self, latent: LatentTensor) -> np.ndarray:
        """Latent → (T, C, H, W, 3) pixels; T is ``latent.frames`` or the 8n+1 preimage."""
        values = np.asarray(latent.values, dtype=np.float64)
        if values.ndim != 5:
            raise CodecError(f"expected (T′, C, h′, w′, d) latent, got {values.shape}")
        if values.shape[-1] != self.spec.latent_channels:
            raise CodecError(f"latent has {values.shape[-1]} channels, codec expects {self.spec.latent_channels}")
        frames = latent.frames if latent.frames and latent_frame_count(latent.frames) == values.shape[0] else frame_count_for(values.shape[0])
        windows = temporal_windows(frames, self.spec.temporal_ratio)
        views = [self._decode_view(values[:, c], windows) for c in range(values.shape[1])]
        return np.stack(views, axis=1)

    def _decode_view(self, view: np.ndarray, windows: List[Tuple[int, int]]) -> np.ndarray:
        s, f = self.spec.spatial_ratio, self.spec.temporal_ratio
        h, w = view.shape[1], view.shape[2]
        frames = []
        for k, (a, b) in enumerate(windows):
            full = np.zeros((h, w, self.spec.block_rank))
            full[..., self.order[: self.kept]] = view[k, ..., : self.kept]
            coeffs = full.reshape(h, w, f, s, s, PIXEL_CHANNELS)[:, :, : b - a]
            blocks = idctn(coeffs, axes=(2, 3, 4, 5), norm="ortho")
            frames.append(rearrange(blocks, "h w l p q k -> l (h p) (w q) k"))
        return np.concatenate(frames, axis=0)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    """10·log10(peak²/MSE), capped at ``PSNR_CAP_DB`` (returned as-is when MSE == 0)."""
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse)))


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    out = np.asarray(test, dtype=np.float64)
    if ref.shape != out.shape:
        raise CodecError(f"psnr: shape mismatch {ref.shape} vs {out.shape}")
    return psnr_from_mse(float(np.mean((ref - out) ** 2)), peak)


def roundtrip_psnr(pixels: np.ndarray, codec: Optional[ToyCodec] = None, peak: float = 1.0) -> float:
    codec = codec or ToyCodec()
    recon = codec.decode(codec.encode(pixels))
    return psnr(pixels, recon, peak)
