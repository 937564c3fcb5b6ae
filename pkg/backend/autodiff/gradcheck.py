"""Central finite-difference oracle for gradient checks."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.autodiff.nn import Parameter
from backend.autodiff.tensor import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def numerical_gradient(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    wrt: int,
    step: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """d sum(fn(*arrays)) / d arrays[wrt] by central differences (only ``indices`` if given)."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    picks = range(flat.size) if indices is None else indices
    for i in picks:
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn(*[Tensor(a) for a in base]).data.sum())
        flat[i] = orig - step
        minus = float(fn(*[Tensor(a) for a in base]).data.sum())
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return grad


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    step: float = 1e-5,
) -> List[float]:
    """Relative error between autodiff and finite differences for every input of ``fn``.

    ``fn`` may return any shape; the scalar checked is the sum of its output.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    grads = backward(out, None, tensors)
    errors = []
    for i, g in enumerate(grads):
        analytic = np.zeros_like(tensors[i].data) if g is None else g
        numeric = numerical_gradient(fn, [t.data for t in tensors], i, step)
        errors.append(relative_error(analytic, numeric))
    return errors


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    named_params: Sequence[Tuple[str, Parameter]],
    step: float = 1e-5,
    samples: int = 3,
    seed: int = 0,
    floor: float = 1e-6,
) -> Dict[str, float]:
    """Relative error per parameter on ``samples`` randomly picked entries.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    with no randomness of its own.
    """
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        picks = rng.choice(p.size, size=min(samples, p.size), replace=False)
        original = p.data.copy()
        numeric = np.zeros(len(picks))
        for j, i in enumerate(picks):
            values = []
            for delta in (step, -step):
                trial = original.copy()
                trial.reshape(-1)[i] += delta
                p.assign(trial)
                values.append(float(loss_fn().data.sum()))
            numeric[j] = (values[0] - values[1]) / (2.0 * step)
        p.assign(original)
        errors[name] = relative_error(analytic.reshape(-1)[picks], numeric, floor)
    for _, p in params:
        p.grad = None
    return errors
