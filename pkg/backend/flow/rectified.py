"""Rectified-flow objective, condition dropout, classifier-free guidance and the Euler sampler.

Time runs from noise (t = 0) to data (t = 1):

    z_t = t · z_1 + (1 − t) · ε,        target velocity  z_1 − ε

Timesteps are logit-normal: t = sigmoid(u) with u ~ N(0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from backend.autodiff import functional as F
from backend.autodiff.tensor import ShapeError, Tensor, no_grad
from backend.codec.latent import CodecSpec, LatentTensor, frame_count_for
from backend.conditions.context import SOURCES, CondContext, check_alignment
from backend.services import logger as project_logger

LOGGER = project_logger.get_logger("flow")

VelocityModel = Callable[..., Tensor]


@dataclass(frozen=True)
class FlowSample:
    z1: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    z_t: np.ndarray


@dataclass
class SamplerConfig:
    steps: int = 30
    cfg_scale: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"sampler steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def sample_timestep(rng: np.random.Generator, size=None):
    return expit(rng.standard_normal(size))


def _broadcast_time(t, like: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def interpolate(z1, eps, t) -> np.ndarray:
    z1 = np.asarray(z1, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z1.shape != eps.shape:
        raise ShapeError(f"interpolate: z1 {z1.shape} and eps {eps.shape} differ")
    tb = _broadcast_time(t, z1)
    return tb * z1 + (1.0 - tb) * eps


def draw_flow_sample(z1, rng: np.random.Generator) -> FlowSample:
    """One (ε, t) draw per batch row of ``z1`` (B, ...)."""
    z1 = np.asarray(z1, dtype=np.float64)
    eps = rng.standard_normal(z1.shape)
    t = sample_timestep(rng, size=z1.shape[0])
    return FlowSample(z1=z1, eps=eps, t=t, z_t=interpolate(z1, eps, t))


def fixed_draws(latents: Sequence[np.ndarray], seed: int) -> List[FlowSample]:
    """Validation draws: the same (ε, t) for a clip on every evaluation."""
    return [draw_flow_sample(z1, np.random.default_rng([seed, i])) for i, z1 in enumerate(latents)]


def cfm_loss(
    model: VelocityModel,
    z1,
    ctx: Optional[CondContext],
    rng: Optional[np.random.Generator] = None,
    sample: Optional[FlowSample] = None,
) -> Tensor:
    """Mean squared error between ``model(z_t, t, ctx)`` and ``z_1 − ε``."""
    z1 = np.asarray(z1, dtype=np.float64)
    if ctx is not None:
        check_alignment(ctx, z1.shape[1], z1.shape[2])
    if sample is None:
        if rng is None:
            raise ValueError("cfm_loss needs an rng or a fixed sample")
        sample = draw_flow_sample(z1, rng)
    pred = model(sample.z_t, sample.t, ctx)
    return F.mse(pred, sample.z1 - sample.eps)


def validation_loss(model: VelocityModel, latents: Sequence[np.ndarray], contexts: Sequence[CondContext], draws: Sequence[FlowSample]) -> float:
    with no_grad():
        losses = [cfm_loss(model, z1, ctx, sample=d).item() for z1, ctx, d in zip(latents, contexts, draws)]
    return float(np.mean(losses))


def drop_conditions(ctx: CondContext, rng: np.random.Generator, p: float = 0.15) -> CondContext:
    """Null each source of each sample independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    flags = rng.random((ctx.batch, len(SOURCES))) < p
    return ctx.with_null(flags)


def cfg_combine(v_cond, v_uncond, s: float):
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"cfg_combine: conditional {v_cond.shape} and unconditional {v_uncond.shape} differ")
    if s == 1.0:
        return v_cond
    if s == 0.0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


def euler_sample(
    model: VelocityModel,
    shape: Tuple[int, ...],
    ctx: Optional[CondContext],
    cfg: Optional[SamplerConfig] = None,
    on_step: Optional[Callable[[int, float, np.ndarray], None]] = None,
) -> np.ndarray:
    """Integrate dz/dt = v_cfg(z, t) from seeded noise at t = 0 to t = 1 in ``cfg.steps`` uniform steps.

    The unconditional branch nulls every source jointly.
    """
    cfg = cfg or SamplerConfig()
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal(shape)
    guided = ctx is not None and cfg.cfg_scale != 1.0
    uncond = ctx.all_null() if guided else None
    dt = 1.0 / cfg.steps
    with no_grad():
        for i in range(cfg.steps):
            t = i * dt
            v = model(z, t, ctx).data
            if guided:
                v = cfg_combine(v, model(z, t, uncond).data, cfg.cfg_scale)
            z = z + dt * v
            if on_step is not None:
                on_step(i, t, z)
    LOGGER.debug("euler sampling done: steps={} cfg={}", cfg.steps, cfg.cfg_scale)
    return z


def sample_latents(
    model: VelocityModel,
    shape: Tuple[int, ...],
    ctx: Optional[CondContext],
    cfg: Optional[SamplerConfig] = None,
    spec: Optional[CodecSpec] = None,
) -> List[LatentTensor]:
    """Euler-sample a (B, T′, C, h′, w′, d) batch; each row carries the clip length T′ decodes to."""
    if len(shape) != 6:
        raise ShapeError(f"sample_latents: expected (B, T′, C, h′, w′, d), got {tuple(shape)}")
    z = euler_sample(model, shape, ctx, cfg)
    frames = frame_count_for(shape[1])
    return [LatentTensor(values=row, frames=frames, spec=spec or CodecSpec()) for row in z]
