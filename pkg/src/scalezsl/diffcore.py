"""Differentiable building blocks shared by every network and loss.

All trainable computation in this package reduces to: single-hidden-layer
MLPs (ReLU), concatenation, reductions, and the numerically stable scalar ops
below. Reverse-mode gradients come from torch autograd; the test suite
certifies them against central finite differences in float64.

Stability contracts:
    stable_lse       m + log sum exp(v - m), m = max v; never overflows
    stable_softplus  max(x, 0) + log1p(exp(-|x|)); the unused exponential
                     branch is never evaluated above 1
    cosine_sim       denominator clamped at 1e-8; a zero vector scores 0
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

COSINE_EPS = 1e-8
LOG_VAR_MIN = -8.0
LOG_VAR_MAX = 8.0


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite; the step is aborted."""


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a single-hidden-layer MLP."""

    in_dim: int
    hidden_dim: int
    out_dim: int
    activation: str = "relu"

    @classmethod
    def quarter(cls, in_dim: int, out_dim: int) -> "MlpSpec":
        """Sizing rule used everywhere: hidden width is a quarter of the input width."""
        return cls(in_dim=in_dim, hidden_dim=quarter_width(in_dim), out_dim=out_dim)


def quarter_width(in_dim: int) -> int:
    return max(1, round(in_dim / 4))


def _init_linear(linear: nn.Linear, generator: torch.Generator | None) -> None:
    # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, drawn
    # from the caller's generator so model construction is seed-reproducible.
    bound = 1.0 / (linear.in_features ** 0.5)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        linear.bias.uniform_(-bound, bound, generator=generator)


class Mlp(nn.Module):
    """linear -> ReLU -> linear, no output activation."""

    def __init__(self, spec: MlpSpec, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if spec.activation != "relu":
            raise ValueError(f"unsupported activation {spec.activation!r}")
        self.spec = spec
        self.hidden = nn.Linear(spec.in_dim, spec.hidden_dim, dtype=dtype)
        self.out = nn.Linear(spec.hidden_dim, spec.out_dim, dtype=dtype)
        _init_linear(self.hidden, generator)
        _init_linear(self.out, generator)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"expected input width {self.spec.in_dim}, got {x.shape[-1]}")
        return self.out(torch.relu(self.hidden(x)))

    def preactivation(self, x: Tensor) -> Tensor:
        """Hidden-layer values before ReLU (for kink detection in gradient checks)."""
        return self.hidden(x)


class GaussianHeadMlp(nn.Module):
    """Shared hidden layer with two affine heads: mean and clamped log-variance."""

    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        hidden_dim = quarter_width(in_dim)
        self.hidden = nn.Linear(in_dim, hidden_dim, dtype=dtype)
        self.mu_head = nn.Linear(hidden_dim, out_dim, dtype=dtype)
        self.log_var_head = nn.Linear(hidden_dim, out_dim, dtype=dtype)
        for layer in (self.hidden, self.mu_head, self.log_var_head):
            _init_linear(layer, generator)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        h = torch.relu(self.hidden(x))
        mu = self.mu_head(h)
        log_var = torch.clamp(self.log_var_head(h), LOG_VAR_MIN, LOG_VAR_MAX)
        return mu, log_var

    def preactivation(self, x: Tensor) -> Tensor:
        return self.hidden(x)


def stable_lse(values: Tensor, dim: int = -1) -> Tensor:
    """log sum exp along ``dim`` via the max-shift trick; safe for values up to ~1e30."""
    if values.shape[dim] == 0:
        raise ValueError("stable_lse of an empty set")
    m = values.max(dim=dim, keepdim=True).values.detach()
    return m.squeeze(dim) + torch.log(torch.exp(values - m).sum(dim=dim))


def stable_softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow; monotone, >= 0, >= x."""
    return torch.relu(x) + torch.log1p(torch.exp(-torch.abs(x)))


def cosine_sim(a: Tensor, b: Tensor, dim: int = -1) -> Tensor:
    """Cosine similarity in [-1, 1]; zero vectors yield 0 instead of NaN."""
    dot = (a * b).sum(dim=dim)
    norms = a.norm(dim=dim) * b.norm(dim=dim)
    return dot / torch.clamp(norms, min=COSINE_EPS)


def backward(loss: Tensor, parameters: dict[str, Tensor], intermediates: dict[str, Tensor] | None = None) -> None:
    """Populate ``.grad`` of every parameter with d loss / d param.

    Parameters the loss does not reach get an explicit zero gradient. A
    non-finite loss aborts before any gradient is written; if named
    intermediates are supplied, the first non-finite one is reported.
    """
    if not bool(torch.isfinite(loss)):
        culprit = "loss"
        if intermediates:
            for name, value in intermediates.items():
                if not bool(torch.isfinite(value).all()):
                    culprit = name
                    break
        raise NumericalError(f"non-finite loss; first non-finite intermediate: {culprit}")
    params = list(parameters.values())
    for p in params:
        p.grad = None
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


class RandomStream:
    """Counting wrapper around a torch generator; all stochastic draws go through it.

    The draw counter lets tests assert that deterministic code paths consume
    no randomness, and the (state, draws) pair round-trips through
    checkpoints so resumed runs replay the exact stream.
    """

    def __init__(self, seed: int | None = None):
        self.generator = torch.Generator()
        if seed is not None:
            self.generator.manual_seed(int(seed))
        self.draws = 0

    def normal(self, *shape: int, dtype: torch.dtype = torch.float32) -> Tensor:
        self.draws += 1
        return torch.randn(*shape, generator=self.generator, dtype=dtype)

    def permutation(self, n: int) -> Tensor:
        self.draws += 1
        return torch.randperm(n, generator=self.generator)

    def get_state(self) -> Tensor:
        return self.generator.get_state()

    def set_state(self, state: Tensor) -> None:
        self.generator.set_state(state)
