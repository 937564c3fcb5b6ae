"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from backend.autodiff import functional as F
from backend.autodiff.tensor import ArrayLike, ShapeError, Tensor, as_tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad and may be reassigned by optimizers."""

    def __init__(self, data: ArrayLike, name: Optional[str] = None) -> None:
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    def assign(self, value: np.ndarray) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"assign: shape {arr.shape} does not match parameter shape {self.shape}")
        arr.flags.writeable = False
        self.data = arr


class Module:
    """Base class: parameters and submodules are discovered from attributes in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name in own:
                own[name].assign(value)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()) -> None:
        self._items: List[Module] = list(modules)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for idx, module in enumerate(self._items):
            yield from module.named_parameters(prefix=f"{prefix}{idx}.")

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, idx: int) -> Module:
        return self._items[idx]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out).

    ``init``: "xavier" (default), "zero" (ControlNet-style no-op projection),
    "identity" (eye padded/truncated to (in, out)) or "normal" (std 0.02).
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, init: str = "xavier") -> None:
        if init == "xavier":
            weight = _xavier(rng, in_dim, out_dim)
        elif init == "zero":
            weight = np.zeros((in_dim, out_dim))
        elif init == "identity":
            weight = np.eye(in_dim, out_dim)
        elif init == "normal":
            weight = rng.normal(0.0, 0.02, size=(in_dim, out_dim))
        else:
            raise ValueError(f"unknown init '{init}'")
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x: ArrayLike) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: input feature size {x.shape[-1]} != {self.in_dim} for shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6) -> None:
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: ArrayLike) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two-layer perceptron with GELU; ``zero_out`` makes the block a no-op at init."""

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        out_dim: int,
        rng: np.random.Generator,
        zero_out: bool = False,
        identity_init: bool = False,
    ) -> None:
        first = "identity" if identity_init else "xavier"
        last = "zero" if zero_out else ("identity" if identity_init else "xavier")
        self.fc1 = Linear(in_dim, hidden, rng, init=first)
        self.fc2 = Linear(hidden, out_dim, rng, init=last)

    def forward(self, x: ArrayLike) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 1.0) -> None:
        self.table = Parameter(rng.normal(0.0, std, size=(count, dim)))
        self.count = count

    def forward(self, indices: np.ndarray) -> Tensor:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.count):
            raise ShapeError(f"embedding: index out of range [0, {self.count})")
        return self.table[idx]


class MultiHeadAttention(Module):
    """Multi-head attention; self-attention when ``context`` is omitted.

    ``positions`` enables rotary embeddings on queries and keys along the
    sequence axis (self-attention only). ``zero_out`` zero-initializes the
    output projection.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        context_dim: Optional[int] = None,
        zero_out: bool = False,
        rope_base: float = F.ROPE_BASE,
    ) -> None:
        if dim % heads:
            raise ShapeError(f"attention: width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.context_dim = context_dim or dim
        self.rope_base = rope_base
        self.q = Linear(dim, dim, rng)
        self.k = Linear(self.context_dim, dim, rng)
        self.v = Linear(self.context_dim, dim, rng)
        self.out = Linear(dim, dim, rng, init="zero" if zero_out else "xavier")

    def project_qkv(self, x: Tensor, context: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
        source = x if context is None else context
        if source.shape[-1] != self.context_dim:
            raise ShapeError(f"attention: context width {source.shape[-1]} != {self.context_dim}")
        return (
            F.split_heads(self.q(x), self.heads),
            F.split_heads(self.k(source), self.heads),
            F.split_heads(self.v(source), self.heads),
        )

    def forward(
        self,
        x: ArrayLike,
        context: Optional[ArrayLike] = None,
        mask: Optional[np.ndarray] = None,
        positions: Optional[Sequence[int]] = None,
    ) -> Tensor:
        x = as_tensor(x)
        ctx = None if context is None else as_tensor(context)
        q, k, v = self.project_qkv(x, ctx)
        if positions is not None:
            q = F.rope_apply(q, positions, self.rope_base)
            k = F.rope_apply(k, positions, self.rope_base)
        return self.out(F.merge_heads(F.attention(q, k, v, mask=mask)))
