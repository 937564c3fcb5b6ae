"""Codec exactness at full rank and the PSNR closed form."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from backend.codec.latent import CodecSpec, ToyCodec, psnr_from_mse
from backend.services.config import RunConfig

ROUNDTRIP_TOLERANCE = 1e-9


def check_full_rank_roundtrip(config: RunConfig) -> Tuple[bool, str]:
    spec = CodecSpec(latent_channels=CodecSpec().block_rank)
    codec = ToyCodec(spec)
    pixels = np.random.default_rng(config.seeds.data).random((9, 2, 16, 24, 3))
    decoded = codec.decode(codec.encode(pixels))
    err = float(np.max(np.abs(decoded - pixels)))
    return err < ROUNDTRIP_TOLERANCE, f"max abs error {err:.2e}"


def check_psnr_closed_form(config: RunConfig) -> Tuple[bool, str]:
    value = round(psnr_from_mse(1.0, peak=255.0), 4)
    return value == 48.1308, f"PSNR(peak 255, MSE 1) = {value} dB"


def check_parallel_encode(config: RunConfig) -> Tuple[bool, str]:
    codec = ToyCodec(CodecSpec(latent_channels=config.codec.latent_channels))
    pixels = np.random.default_rng(config.seeds.data).random((8, 3, 16, 16, 3))
    serial = codec.encode(pixels, workers=1).values
    parallel = codec.encode(pixels, workers=3).values
    return bool(np.array_equal(serial, parallel)), f"latent {serial.shape}"
