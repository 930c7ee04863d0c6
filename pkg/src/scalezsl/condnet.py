"""Text-side networks: conditioning vectors, class priors, latent prototypes.

All three consume frozen text embeddings, so they are the only trainable path
through which unseen classes are reachable: given a class's global embedding
and token array, the conditioning vector, the latent prior, and the latent
prototype are all computable with no feature input.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .diffcore import COSINE_EPS, GaussianHeadMlp, Mlp, MlpSpec


def pool_tokens(tokens: Tensor) -> Tensor:
    """Arithmetic mean over token rows: (..., L, d_t) -> (..., d_t)."""
    return tokens.mean(dim=-2)


class ConditioningNet(nn.Module):
    """Projects (global embedding, pooled tokens) to the conditioning vector.

    Two separate quarter-width MLPs, one per text view; their outputs are
    concatenated, so the conditioning width is twice ``proj_out``.
    """

    def __init__(self, d_t: int, proj_out: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.d_t = d_t
        self.d_c = 2 * proj_out
        self.branch_global = Mlp(MlpSpec.quarter(d_t, proj_out), generator, dtype)
        self.branch_tokens = Mlp(MlpSpec.quarter(d_t, proj_out), generator, dtype)

    def forward(self, h_global: Tensor, pooled_tokens: Tensor) -> Tensor:
        return torch.cat(
            [self.branch_global(h_global), self.branch_tokens(pooled_tokens)], dim=-1
        )

    def condition(self, h_global: Tensor, tokens: Tensor) -> Tensor:
        """Conditioning vector for one class from its raw (unpooled) token array."""
        return self.forward(h_global, pool_tokens(tokens))


class PriorNet(nn.Module):
    """Class-conditional latent prior: conditioning vector -> (mu, log variance)."""

    def __init__(self, d_c: int, d_z: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.net = GaussianHeadMlp(d_c, d_z, generator, dtype)

    def forward(self, c: Tensor) -> tuple[Tensor, Tensor]:
        return self.net(c)


class PrototypeNet(nn.Module):
    """Latent prototype projection: global text embedding -> latent vector."""

    def __init__(self, d_t: int, d_z: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.net = Mlp(MlpSpec.quarter(d_t, d_z), generator, dtype)

    def forward(self, h_global: Tensor) -> Tensor:
        return self.net(h_global)


def semantic_similarity(h_a: np.ndarray, h_b: np.ndarray) -> float:
    """Cosine similarity of two global text embeddings (norms clamped at 1e-8)."""
    a = np.asarray(h_a, dtype=np.float64)
    b = np.asarray(h_b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a) * np.linalg.norm(b)), COSINE_EPS)
    return float(a @ b / denom)


def similarity_matrix(text_global: np.ndarray) -> np.ndarray:
    """All-pairs semantic similarities; symmetric with unit diagonal.

    Text encoders are frozen, so this is a constant of the run: compute once,
    cache, and index. Rows are normalized embeddings, entries their dot
    products; the diagonal is forced to exactly 1.
    """
    h = np.asarray(text_global, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), COSINE_EPS)
    unit = h / norms
    sims = unit @ unit.T
    sims = np.clip((sims + sims.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sims, 1.0)
    return sims
