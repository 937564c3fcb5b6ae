"""Rectified-flow identities, guidance, condition dropout and a learning smoke run."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from backend.autodiff.nn import Linear, Module
from backend.autodiff.optim import Adam
from backend.autodiff.tensor import Tensor, as_tensor, concat
from backend.flow.rectified import (
    SamplerConfig,
    cfg_combine,
    cfm_loss,
    drop_conditions,
    euler_sample,
    fixed_draws,
    interpolate,
    validation_loss,
)
from backend.services.config import RunConfig
from backend.verify.fixtures import null_context

DROP_TRIALS = 10_000
DROP_SLACK = 0.01
ORACLE_STEPS = (1, 2, 7, 30)


class LinearVelocity(Module):
    """v(z, t) = A [z; t] + b over the last axis."""

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.proj = Linear(dim + 1, dim, rng)

    def forward(self, z, t, ctx=None) -> Tensor:
        z = as_tensor(z)
        t = np.asarray(t, dtype=np.float64)
        column = np.broadcast_to(t.reshape(t.shape + (1,) * (z.ndim - t.ndim)), z.shape[:-1] + (1,))
        return self.proj(concat([z, Tensor(column)], axis=-1))


def oracle_velocity(target: np.ndarray):
    """Straight-line velocity toward ``target`` from the current state."""

    def model(z, t, ctx=None) -> Tensor:
        return Tensor((target - np.asarray(z)) / (1.0 - t))

    return model


def check_interpolation_endpoints(config: RunConfig) -> Tuple[bool, str]:
    rng = np.random.default_rng(config.seeds.train)
    z1, eps = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    start = np.array_equal(interpolate(z1, eps, 0.0), eps)
    end = np.array_equal(interpolate(z1, eps, 1.0), z1)
    return start and end, f"t=0 -> eps {start}, t=1 -> z1 {end}"


def check_oracle_euler(config: RunConfig) -> Tuple[bool, str]:
    target = np.random.default_rng(config.seeds.train).normal(size=(1, 2, 3))
    worst = 0.0
    for steps in ORACLE_STEPS:
        z = euler_sample(oracle_velocity(target), target.shape, None, SamplerConfig(steps=steps, seed=config.sampler.seed))
        worst = max(worst, float(np.max(np.abs(z - target))))
    return worst < 1e-10, f"max endpoint error {worst:.2e} over steps {ORACLE_STEPS}"


def check_cfg_identity(config: RunConfig) -> Tuple[bool, str]:
    rng = np.random.default_rng(config.seeds.train)
    v, u = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    one = np.array_equal(cfg_combine(v, u, 1.0), v)
    zero = np.array_equal(cfg_combine(v, u, 0.0), u)
    return one and zero, f"s=1 -> conditional {one}, s=0 -> unconditional {zero}"


def check_condition_drop_rate(config: RunConfig) -> Tuple[bool, str]:
    p = config.conditions.drop_prob
    dropped = drop_conditions(null_context(DROP_TRIALS), np.random.default_rng(config.seeds.train), p)
    rate = float(dropped.null.mean())
    return abs(rate - p) <= DROP_SLACK, f"observed {rate:.4f} for p={p}"


def linear_learning_curve(seed: int = 0, steps: int = 200, lr: float = 1e-2) -> Tuple[float, float]:
    """Validation loss of a linear velocity model before and after ``steps`` Adam steps on fixed data."""
    rng = np.random.default_rng(seed)
    z1 = rng.normal(loc=1.5, scale=0.5, size=(16, 4))
    model = LinearVelocity(4, rng)
    optimizer = Adam(list(model.named_parameters()), lr=lr, warmup_steps=0)
    draws = fixed_draws([z1], seed + 1)
    before = validation_loss(model, [z1], [None], draws)
    for step in range(steps):
        loss = cfm_loss(model, z1, None, np.random.default_rng([seed, step]))
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
    return before, validation_loss(model, [z1], [None], draws)


def check_linear_model_learns(config: RunConfig) -> Tuple[bool, str]:
    before, after = linear_learning_curve(config.seeds.train)
    return after < before, f"validation loss {before:.4f} -> {after:.4f}"
