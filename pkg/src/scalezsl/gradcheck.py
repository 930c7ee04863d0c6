"""Gradient certification harness: analytic vs central finite differences.

Builds a seeded micro model in float64 and differences the exact function
the optimizer sees. Two quantities are frozen at the base point so the
difference quotient matches the training objective's gradient field: the
latent noise (one draw reused by every evaluation) and the per-sample
uncertainty (which the loss treats as a detached measurement, so its
dependence on the parameters must not leak into the comparison).

Evaluations also emit a kink signature (hidden-layer preactivations and the
log-variance heads' distance to their clamp) so the finite-difference side
can discard coordinates whose quotient straddles a non-differentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import oracle
from .databank import SynthSpec, synthesize_bank
from .diffcore import LOG_VAR_MAX, RandomStream
from .model import ModelDims, RecognitionModel, TextContext, prepare_text
from .objectives import ScaleHyper, batch_losses

MICRO_D_S = 6
MICRO_D_T = 8
MICRO_D_Z = 4
MICRO_PROJ_OUT = 4
MICRO_CLASSES = 3
MICRO_BATCH = 5
MICRO_BETA = 0.7


@dataclass
class MicroSetup:
    model: RecognitionModel
    x: torch.Tensor
    labels: torch.Tensor
    text: TextContext
    eps: torch.Tensor
    u0: torch.Tensor
    hyper: ScaleHyper
    beta: float


def build_micro_setup(seed: int, hyper: ScaleHyper | None = None) -> MicroSetup:
    """Seeded float64 micro model over 3 seen classes with a 5-sample batch."""
    hyper = hyper or ScaleHyper()
    bank = synthesize_bank(SynthSpec(
        num_seen=MICRO_CLASSES, num_unseen=2, d_s=MICRO_D_S, d_t=MICRO_D_T,
        samples_per_class=2, noise_scale=0.5, mixing_rank=4, seed=seed,
    ))
    # Rows 2y and 2y+1 belong to class y; this ordering puts all 3 classes in
    # the batch with two of them repeated.
    rows = np.array([0, 2, 4, 1, 3])
    x = torch.from_numpy(bank.features[rows].astype(np.float64))
    labels = torch.from_numpy(bank.labels[rows].astype(np.int64))

    stream = RandomStream(seed)
    dims = ModelDims(d_s=MICRO_D_S, d_t=MICRO_D_T, d_z=MICRO_D_Z, proj_out=MICRO_PROJ_OUT)
    model = RecognitionModel(dims, stream.generator, dtype=torch.float64)
    text = prepare_text(bank, torch.float64)

    eps = stream.normal(MICRO_BATCH, 1, MICRO_D_Z, dtype=torch.float64)

    base = batch_losses(model, x, labels, text, MICRO_BETA, hyper, eps=eps)
    u0 = base.intermediates["u"].detach().clone()
    return MicroSetup(model=model, x=x, labels=labels, text=text, eps=eps,
                      u0=u0, hyper=hyper, beta=MICRO_BETA)


def _kink_signature(model: RecognitionModel) -> tuple[list, list[torch.Tensor]]:
    """Hook every hidden layer and log-variance head; return (handles, capture list)."""
    captured: list[torch.Tensor] = []

    def grab_hidden(_mod, _inp, out):
        captured.append(out.detach().reshape(-1))

    def grab_log_var(_mod, _inp, out):
        captured.append((out.detach().abs() - LOG_VAR_MAX).reshape(-1))

    handles = []
    for mlp in (model.conditioning.branch_global, model.conditioning.branch_tokens,
                model.decoder.net, model.prototype.net):
        handles.append(mlp.hidden.register_forward_hook(grab_hidden))
    for head in (model.prior.net, model.encoder.net):
        handles.append(head.hidden.register_forward_hook(grab_hidden))
        handles.append(head.log_var_head.register_forward_hook(grab_log_var))
    return handles, captured


def micro_loss_and_signature(setup: MicroSetup, param_values: dict[str, np.ndarray]) -> tuple[float, np.ndarray]:
    """Evaluate the frozen-noise objective at the given parameter values."""
    params = setup.model.param_dict()
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(np.asarray(param_values[name], dtype=np.float64)))
    handles, captured = _kink_signature(setup.model)
    try:
        with torch.no_grad():
            result = batch_losses(setup.model, setup.x, setup.labels, setup.text,
                                  setup.beta, setup.hyper, eps=setup.eps, u_override=setup.u0)
    finally:
        for h in handles:
            h.remove()
    signature = torch.cat(captured).numpy()
    return float(result.total), signature


def analytic_gradients(setup: MicroSetup) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the same frozen-noise objective."""
    params = setup.model.param_dict()
    for p in params.values():
        p.grad = None
    result = batch_losses(setup.model, setup.x, setup.labels, setup.text,
                          setup.beta, setup.hyper, eps=setup.eps, u_override=setup.u0)
    result.total.backward()
    return {
        name: (p.grad.numpy().copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }


def run_gradcheck(seed: int, step: float = 1e-5, threshold: float = 1e-4,
                  corrupt_param: str | None = None) -> oracle.GradCheckReport:
    """Full certification for one seed; ``corrupt_param`` flips one analytic
    gradient's sign so tests can confirm the harness actually detects faults."""
    setup = build_micro_setup(seed)
    analytic = analytic_gradients(setup)
    if corrupt_param is not None:
        if corrupt_param not in analytic:
            raise ValueError(f"unknown parameter {corrupt_param!r}")
        analytic[corrupt_param] = -analytic[corrupt_param]

    base = {name: p.detach().numpy().copy() for name, p in setup.model.param_dict().items()}

    def loss_fn(values):
        return micro_loss_and_signature(setup, values)

    fd = oracle.fd_gradient(loss_fn, base, step=step)
    return oracle.grad_check(analytic, fd, threshold=threshold)
