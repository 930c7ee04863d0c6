"""Training losses: listwise energy discrimination, prototype contrast, total.

The listwise term contrasts each sample's positive-class energy against a
soft maximum of its in-batch negative-class energies. Two modulations shape
it: negatives semantically close to the positive class (by text cosine
similarity) are lifted inside the soft maximum, and the posterior uncertainty
of the positive pair both relaxes the margin and downweights the sample.

Uncertainty is treated as a measurement, not an optimization target: it is
detached from the graph wherever it appears, otherwise the loss could be
gamed by inflating posterior variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .cvae import TRAIN_SAMPLED, ElboBreakdown
from .diffcore import NumericalError, RandomStream, cosine_sim, stable_lse, stable_softplus
from .model import RecognitionModel, TextContext


@dataclass(frozen=True)
class ScaleHyper:
    """Loss hyperparameters; defaults are the grid-searched operating point."""

    alpha: float = 1.0         # semantic bias strength on negative energies
    tau: float = 1.0           # base margin
    beta_u: float = 0.5        # uncertainty-adaptive margin relaxation
    gamma: float = 2.0         # uncertainty-based loss reweighting
    lambda_temp: float = 0.2   # prototype contrast temperature
    lambda1: float = 1.0       # weight of the listwise energy loss
    lambda2: float = 0.5       # weight of the prototype contrast loss

    def validate(self) -> None:
        for name in ("alpha", "tau", "beta_u", "gamma", "lambda_temp", "lambda1", "lambda2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"hyperparameter {name} must be finite")
        if self.lambda_temp <= 0:
            raise ValueError(f"lambda_temp must be > 0, got {self.lambda_temp}")
        for name in ("alpha", "beta_u", "gamma", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"hyperparameter {name} must be >= 0")


def uncertainty(log_var_q_pos: Tensor) -> Tensor:
    """Mean posterior variance over latent dimensions, detached from the graph."""
    return torch.exp(log_var_q_pos).mean(dim=-1).detach()


def aggregate_negatives(neg_energies: Tensor, similarities: Tensor, alpha: float) -> Tensor:
    """Soft maximum of negative energies, each lifted by alpha * similarity.

    With alpha = 0 this is a plain log-sum-exp; raising any similarity
    strictly raises the aggregate, which is what focuses the margin on
    semantically confusable negatives.
    """
    if neg_energies.shape[-1] == 0:
        raise ValueError("aggregate_negatives needs at least one negative")
    return stable_lse(neg_energies + alpha * similarities, dim=-1)


def energy_gap(pos_energy: Tensor, e_neg: Tensor, u: Tensor, hyper: ScaleHyper) -> Tensor:
    """Margin violation: positive energy minus aggregated negatives, with the
    base margin relaxed proportionally to posterior uncertainty."""
    return pos_energy - e_neg + hyper.tau - hyper.beta_u * u


@dataclass
class BatchEnergies:
    """Per-sample energies feeding the listwise loss (rectangular negative sets)."""

    pos_energy: Tensor        # (B,)
    neg_energies: Tensor      # (B, K)
    neg_similarities: Tensor  # (B, K)
    uncertainty: Tensor       # (B,) detached


def scale_loss(batch: BatchEnergies, hyper: ScaleHyper) -> Tensor:
    """Confidence-weighted softplus of the energy gap, averaged over the batch."""
    u = batch.uncertainty.detach()
    e_neg = aggregate_negatives(batch.neg_energies, batch.neg_similarities, hyper.alpha)
    gap = energy_gap(batch.pos_energy, e_neg, u, hyper)
    per_sample = torch.exp(-hyper.gamma * u) * stable_softplus(gap)
    return per_sample.mean()


def proto_loss(mu_q_pos: Tensor, prototypes: Tensor, pos_index: Tensor, lambda_temp: float) -> Tensor:
    """Cross-entropy over cosine similarities between posterior means and prototypes.

    ``mu_q_pos`` is (B, d_z), ``prototypes`` (C, d_z), ``pos_index`` (B,) the
    row of each sample's own class prototype. Averaged over the batch.
    """
    c = prototypes.shape[0]
    if pos_index.min() < 0 or pos_index.max() >= c:
        raise IndexError(f"positive prototype index outside [0, {c})")
    sims = cosine_sim(mu_q_pos.unsqueeze(1), prototypes.unsqueeze(0), dim=-1)  # (B, C)
    logits = sims / lambda_temp
    pos_logit = logits.gather(1, pos_index.view(-1, 1)).squeeze(1)
    return (stable_lse(logits, dim=-1) - pos_logit).mean()


def total_loss(elbo_pos: Tensor, l_scale: Tensor, l_proto: Tensor, hyper: ScaleHyper) -> Tensor:
    """Negative positive-pair ELBO plus the weighted auxiliary terms."""
    parts = {"elbo_pos": elbo_pos, "l_scale": l_scale, "l_proto": l_proto}
    for name, value in parts.items():
        if not bool(torch.isfinite(value).all()):
            raise NumericalError(f"non-finite loss component: {name}")
    return -elbo_pos + hyper.lambda1 * l_scale + hyper.lambda2 * l_proto


@dataclass
class BatchLossResult:
    """Everything the trainer logs per step, plus named intermediates for diagnostics."""

    total: Tensor
    neg_elbo: Tensor   # mean over batch of -ELBO on the positive pair
    l_scale: Tensor
    l_proto: Tensor
    mean_u: float
    intermediates: dict[str, Tensor] = field(default_factory=dict)


def batch_losses(
    model: RecognitionModel,
    x: Tensor,
    labels: Tensor,
    text: TextContext,
    beta: float,
    hyper: ScaleHyper,
    stream: RandomStream | None = None,
    eps: Tensor | None = None,
    u_override: Tensor | None = None,
) -> BatchLossResult:
    """Full training objective for one minibatch.

    The candidate set is the distinct classes present in the batch; each
    sample's negatives are every candidate except its own label, so the
    energy grid is one (B, C_batch) evaluation in sampled mode. Samples
    whose batch contains no other class carry no listwise term.

    ``eps`` fixes the latent noise (any shape broadcastable to
    (B, C_batch, d_z)) and ``u_override`` freezes the uncertainty values;
    both exist so gradient checks can difference the exact function the
    optimizer sees.
    """
    class_ids, pos_col = torch.unique(labels, sorted=True, return_inverse=True)
    b, c_b = labels.shape[0], class_ids.shape[0]

    cond = model.condition_classes(text, class_ids)                # (C_b, d_c)
    if eps is None:
        if stream is None:
            raise ValueError("batch_losses needs either a random stream or explicit noise")
        # One latent draw per example per step, shared across its candidate
        # classes; common noise keeps per-row energy differences low-variance.
        eps = stream.normal(b, 1, model.dims.d_z, dtype=x.dtype)
    breakdown = model.elbo(
        x.unsqueeze(1), cond.unsqueeze(0), beta, TRAIN_SAMPLED, eps=eps
    )                                                              # fields (B, C_b)

    rows = torch.arange(b)
    elbo_pos = breakdown.elbo[rows, pos_col]
    neg_elbo = -elbo_pos.mean()

    u = uncertainty(breakdown.log_var_q[rows, pos_col])
    if u_override is not None:
        u = u_override
    mean_u = float(u.mean())

    if c_b > 1:
        neg_mask = torch.ones((b, c_b), dtype=torch.bool)
        neg_mask[rows, pos_col] = False
        neg_energies = breakdown.energy[neg_mask].reshape(b, c_b - 1)
        sims = text.sims.to(x.dtype)[labels.long()][:, class_ids.long()]  # (B, C_b)
        neg_sims = sims[neg_mask].reshape(b, c_b - 1)
        energies = BatchEnergies(
            pos_energy=breakdown.energy[rows, pos_col],
            neg_energies=neg_energies,
            neg_similarities=neg_sims,
            uncertainty=u,
        )
        l_scale = scale_loss(energies, hyper)
    else:
        l_scale = torch.zeros((), dtype=x.dtype)

    prototypes = model.prototypes(text, class_ids)                 # (C_b, d_z)
    mu_q_pos = breakdown.mu_q[rows, pos_col]
    l_proto = proto_loss(mu_q_pos, prototypes, pos_col, hyper.lambda_temp)

    total = total_loss(elbo_pos.mean(), l_scale, l_proto, hyper)
    intermediates = {
        "conditioning": cond,
        "recon_logprob": breakdown.recon_logprob,
        "kl": breakdown.kl,
        "pos_elbo": elbo_pos,
        "u": u,
        "l_scale": l_scale,
        "l_proto": l_proto,
        "total": total,
    }
    return BatchLossResult(
        total=total, neg_elbo=neg_elbo, l_scale=l_scale, l_proto=l_proto,
        mean_u=mean_u, intermediates=intermediates,
    )
