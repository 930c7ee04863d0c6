"""The assembled recognition model: five networks plus frozen text context."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .condnet import ConditioningNet, PriorNet, PrototypeNet, pool_tokens, similarity_matrix
from .cvae import EVAL_MEAN, TRAIN_SAMPLED, Decoder, ElboBreakdown, Encoder, gaussian_kl, reparameterize
from .databank import FeatureBank
from .diffcore import RandomStream


@dataclass(frozen=True)
class ModelDims:
    """Widths of every network; the conditioning width is 2 * proj_out."""

    d_s: int
    d_t: int
    d_z: int = 64
    proj_out: int = 128

    @property
    def d_c(self) -> int:
        return 2 * self.proj_out


@dataclass(frozen=True)
class TextContext:
    """Frozen per-class text tensors, precomputed once per run.

    ``sims`` is the all-pairs cosine similarity of global embeddings; the
    text encoder upstream is frozen, so it is a constant of training.
    """

    h_global: Tensor   # (C, d_t)
    pooled: Tensor     # (C, d_t) mean over token rows
    sims: Tensor       # (C, C) float64


def prepare_text(bank: FeatureBank, dtype: torch.dtype = torch.float32) -> TextContext:
    h = torch.from_numpy(np.ascontiguousarray(bank.text_global)).to(dtype)
    pooled = torch.stack(
        [pool_tokens(torch.from_numpy(np.ascontiguousarray(t)).to(dtype)) for t in bank.text_tokens]
    )
    sims = torch.from_numpy(similarity_matrix(bank.text_global))
    return TextContext(h_global=h, pooled=pooled, sims=sims)


class RecognitionModel(nn.Module):
    """Conditioning net, prior net, encoder, decoder, and prototype projection.

    ``elbo`` is the single scoring path shared by training and inference;
    the pair counters record how many (sample, class) evaluations the encoder
    and decoder have performed, which tests use to assert the single-pass
    inference contract.
    """

    def __init__(self, dims: ModelDims, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.dims = dims
        self.conditioning = ConditioningNet(dims.d_t, dims.proj_out, generator, dtype)
        self.prior = PriorNet(dims.d_c, dims.d_z, generator, dtype)
        self.encoder = Encoder(dims.d_s, dims.d_c, dims.d_z, generator, dtype)
        self.decoder = Decoder(dims.d_z, dims.d_c, dims.d_s, generator, dtype)
        self.prototype = PrototypeNet(dims.d_t, dims.d_z, generator, dtype)
        self.counters = {"encoder_pair_evals": 0, "decoder_pair_evals": 0}

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.net.hidden.weight.dtype

    def reset_counters(self) -> None:
        for key in self.counters:
            self.counters[key] = 0

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def condition_classes(self, text: TextContext, class_ids: Tensor) -> Tensor:
        """Conditioning vectors for the given class indices: (len(class_ids), d_c)."""
        return self.conditioning(text.h_global[class_ids], text.pooled[class_ids])

    def prototypes(self, text: TextContext, class_ids: Tensor) -> Tensor:
        return self.prototype(text.h_global[class_ids])

    def elbo(self, x: Tensor, c: Tensor, beta: float, mode: str,
             stream: RandomStream | None = None, eps: Tensor | None = None) -> ElboBreakdown:
        """Score (feature, conditioning) pairs; broadcasts over leading axes.

        ``eval_mean`` uses the posterior mean as the latent (no randomness
        consumed, fully deterministic); ``train_sampled`` draws one latent
        sample per pair from ``stream`` unless explicit noise is given.
        """
        if mode not in (TRAIN_SAMPLED, EVAL_MEAN):
            raise ValueError(f"unknown elbo mode {mode!r}")
        batch_shape = torch.broadcast_shapes(x.shape[:-1], c.shape[:-1])
        x = x.expand(*batch_shape, x.shape[-1])
        c = c.expand(*batch_shape, c.shape[-1])
        n_pairs = int(np.prod(batch_shape)) if batch_shape else 1

        mu_q, log_var_q = self.encoder(x, c)
        self.counters["encoder_pair_evals"] += n_pairs
        if mode == EVAL_MEAN:
            z = mu_q
        else:
            z = reparameterize(mu_q, log_var_q, stream=stream, eps=eps)
        mu_d = self.decoder(z, c)
        self.counters["decoder_pair_evals"] += n_pairs

        recon = -0.5 * ((x - mu_d) ** 2).sum(dim=-1)
        mu_p, log_var_p = self.prior(c)
        kl = gaussian_kl(mu_q, log_var_q, mu_p, log_var_p)
        elbo = recon - beta * kl
        return ElboBreakdown(
            recon_logprob=recon, kl=kl, beta=beta, elbo=elbo, energy=-elbo,
            mu_q=mu_q, log_var_q=log_var_q,
        )
