"""Autodiff against central finite differences."""

from __future__ import annotations

from typing import Callable, List, Sequence, Tuple

import numpy as np

from backend.autodiff import functional as F
from backend.autodiff.gradcheck import check_gradients, check_parameter_gradients
from backend.autodiff.tensor import concat, stack
from backend.codec.latent import ToyCodec
from backend.flow.rectified import cfm_loss, draw_flow_sample
from backend.models.mvdit import build_model
from backend.services.config import RunConfig
from backend.verify.fixtures import perturb, tiny_batch, tiny_codec, tiny_model_config

PRIMITIVE_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3

Case = Tuple[str, Callable, List[np.ndarray]]


def primitive_cases(rng: np.random.Generator) -> List[Case]:
    def r(*shape: int) -> np.ndarray:
        return rng.normal(size=shape)

    mask = np.array([[True, True, False], [True, False, True]])
    return [
        ("add", lambda a, b: a + b, [r(2, 3), r(3)]),
        ("sub", lambda a, b: a - b, [r(2, 1), r(2, 3)]),
        ("mul", lambda a, b: a * b, [r(2, 3), r(1, 3)]),
        ("div", lambda a, b: a / b, [r(2, 3), 2.0 + rng.random((2, 3))]),
        ("matmul", lambda a, b: a @ b, [r(2, 3, 4), r(4, 2)]),
        ("sum", lambda a: (a * a).sum(axis=1, keepdims=True), [r(2, 3, 2)]),
        ("mean", lambda a: (a * a).mean(axis=(0, 2)), [r(2, 3, 2)]),
        ("exp", lambda a: a.exp(), [r(3, 2)]),
        ("sqrt", lambda a: a.sqrt(), [1.0 + rng.random((3, 2))]),
        ("sigmoid", lambda a: a.sigmoid(), [r(3, 2)]),
        ("gelu", lambda a: a.gelu(), [r(3, 2)]),
        ("reshape", lambda a: a.reshape((3, 2)) * np.arange(6.0).reshape(3, 2), [r(2, 3)]),
        ("transpose", lambda a: a.transpose((2, 0, 1)) * np.arange(24.0).reshape(4, 2, 3), [r(2, 3, 4)]),
        ("broadcast", lambda a: a.broadcast_to((2, 3)) * np.arange(6.0).reshape(2, 3), [r(3)]),
        ("getitem", lambda a: a[1:, ::2].sum() * 3.0 + a[np.array([0, 0, 1])], [r(3, 4)]),
        ("concat", lambda a, b: concat([a, b * 2.0], axis=1) * np.arange(10.0).reshape(2, 5), [r(2, 2), r(2, 3)]),
        ("stack", lambda a, b: stack([a, b], axis=0) * np.arange(12.0).reshape(2, 2, 3), [r(2, 3), r(2, 3)]),
        ("softmax", lambda a: F.softmax(a, mask=mask) * np.arange(6.0).reshape(2, 3), [r(2, 3)]),
        ("layer_norm", lambda a, g, b: F.layer_norm(a, g, b) * np.arange(8.0).reshape(2, 4), [r(2, 4), r(4), r(4)]),
        ("silu", lambda a: F.silu(a), [r(3, 2)]),
        ("attention", lambda q, k, v: F.attention(q, k, v) * np.arange(8.0).reshape(4, 2), [r(4, 3), r(5, 3), r(5, 2)]),
        ("rope", lambda a: F.rope_apply(a, [0, 3, 7]) * np.arange(12.0).reshape(3, 4), [r(3, 4)]),
        ("mse", lambda a, b: F.mse(a, b), [r(2, 3), r(2, 3)]),
    ]


def check_primitives(config: RunConfig) -> Tuple[bool, str]:
    rng = np.random.default_rng(config.seeds.model)
    worst = ("", 0.0)
    for name, fn, arrays in primitive_cases(rng):
        err = max(check_gradients(fn, arrays))
        if err > worst[1]:
            worst = (name, err)
    return worst[1] < PRIMITIVE_TOLERANCE, f"max relative error {worst[1]:.2e} ({worst[0] or 'all exact'})"


def end_to_end_errors(seed: int = 0, samples: int = 1) -> dict:
    """Per-parameter finite-difference errors of the flow loss through a tiny conditioned model."""
    model = build_model(tiny_model_config(), tiny_codec().latent_channels, seed)
    perturb(model, np.random.default_rng(seed + 1))
    inputs, z1 = tiny_batch(frames=1, views=2, batch=2, seed=seed, codec=ToyCodec(tiny_codec()))
    sample = draw_flow_sample(z1, np.random.default_rng(seed + 2))
    flags = np.zeros((2, 5), dtype=bool)
    flags[1, [0, 4]] = True

    def loss_fn():
        ctx = model.conditions.encode(inputs).with_null(flags)
        return cfm_loss(model, z1, ctx, sample=sample)

    return check_parameter_gradients(loss_fn, list(model.named_parameters()), samples=samples, seed=seed)


def check_end_to_end(config: RunConfig) -> Tuple[bool, str]:
    errors = end_to_end_errors(config.seeds.model)
    name = max(errors, key=errors.get)
    return errors[name] < END_TO_END_TOLERANCE, f"{len(errors)} parameters, worst {name} at {errors[name]:.2e}"
