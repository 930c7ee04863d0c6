"""Conditional encoder/decoder, reparameterized sampling, and the ELBO.

The decoder variance is fixed at 1, so the reconstruction log-likelihood is
-0.5 * squared error with the Gaussian normalization constant dropped. The
constant is identical for every candidate class, and inference compares
classes by ELBO differences only, so dropping it cannot change a prediction;
absolute ELBO values are therefore comparable only within this package.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .diffcore import GaussianHeadMlp, Mlp, MlpSpec, RandomStream

TRAIN_SAMPLED = "train_sampled"
EVAL_MEAN = "eval_mean"


class Encoder(nn.Module):
    """Approximate posterior: concat(feature, conditioning) -> (mu, log variance)."""

    def __init__(self, d_s: int, d_c: int, d_z: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.net = GaussianHeadMlp(d_s + d_c, d_z, generator, dtype)

    def forward(self, x: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return self.net(torch.cat([x, c], dim=-1))


class Decoder(nn.Module):
    """Reconstruction mean: concat(latent, conditioning) -> feature estimate."""

    def __init__(self, d_z: int, d_c: int, d_s: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.net = Mlp(MlpSpec.quarter(d_z + d_c, d_s), generator, dtype)

    def forward(self, z: Tensor, c: Tensor) -> Tensor:
        return self.net(torch.cat([z, c], dim=-1))


def reparameterize(mu: Tensor, log_var: Tensor, stream: RandomStream | None = None,
                   eps: Tensor | None = None) -> Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I); gradients flow to mu and log_var only."""
    if eps is None:
        if stream is None:
            raise ValueError("reparameterize needs either a random stream or explicit noise")
        eps = stream.normal(*mu.shape, dtype=mu.dtype)
    return mu + torch.exp(0.5 * log_var) * eps


def gaussian_kl(mu_q: Tensor, log_var_q: Tensor, mu_p: Tensor, log_var_p: Tensor) -> Tensor:
    """Closed-form KL between diagonal Gaussians, summed over the last axis.

    Clamped at zero: the exact formula can land a rounding error below zero
    when q nearly equals p, and downstream contracts require kl >= 0.
    """
    var_q = torch.exp(log_var_q)
    inv_var_p = torch.exp(-log_var_p)
    terms = log_var_p - log_var_q + (var_q + (mu_q - mu_p) ** 2) * inv_var_p - 1.0
    return torch.clamp(0.5 * terms.sum(dim=-1), min=0.0)


@dataclass
class ElboBreakdown:
    """Per-pair ELBO pieces; ``elbo == recon_logprob - beta * kl`` and ``energy == -elbo``.

    Tensor fields share one batch shape; ``mu_q``/``log_var_q`` carry the
    posterior for downstream uncertainty and prototype terms.
    """

    recon_logprob: Tensor
    kl: Tensor
    beta: float
    elbo: Tensor
    energy: Tensor
    mu_q: Tensor
    log_var_q: Tensor
