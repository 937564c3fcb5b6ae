"""Fixed-vocabulary text embedding.

Weather and time-of-day tokens get their own rows; anything else maps to
``<unk>``. An empty prompt is the single ``<null>`` token.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from backend.autodiff.nn import Embedding, Module
from backend.autodiff.tensor import Tensor
from backend.scene.records import TIME_TOKENS, WEATHER_TOKENS, TextPrompt

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
VOCABULARY: Tuple[str, ...] = (NULL_TOKEN, UNK_TOKEN) + WEATHER_TOKENS + TIME_TOKENS
TOKEN_INDEX = {tok: i for i, tok in enumerate(VOCABULARY)}


def token_ids(prompt: TextPrompt) -> List[int]:
    if not prompt.tokens:
        return [TOKEN_INDEX[NULL_TOKEN]]
    return [TOKEN_INDEX.get(tok, TOKEN_INDEX[UNK_TOKEN]) for tok in prompt.tokens]


def batch_token_ids(prompts: Sequence[TextPrompt]) -> Tuple[np.ndarray, np.ndarray]:
    """(B, L) ids padded with ``<null>`` and the matching (B, L) mask."""
    ids = [token_ids(p) for p in prompts]
    length = max(len(i) for i in ids)
    out = np.full((len(ids), length), TOKEN_INDEX[NULL_TOKEN], dtype=np.int64)
    mask = np.zeros((len(ids), length), dtype=bool)
    for b, row in enumerate(ids):
        out[b, : len(row)] = row
        mask[b, : len(row)] = True
    return out, mask


class TextEncoder(Module):
    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.table = Embedding(len(VOCABULARY), dim, rng, std=0.5)

    def forward(self, ids: np.ndarray) -> Tensor:
        """``ids``: (B, L) → tokens (B, 1, 1, L, D)."""
        tokens = self.table(ids)
        return tokens.reshape((ids.shape[0], 1, 1, ids.shape[1], tokens.shape[-1]))
