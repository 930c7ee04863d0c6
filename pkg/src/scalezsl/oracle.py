"""Independent float64 reference implementations used for verification.

Everything here is a straight-line numpy transcription of the quantities the
production path computes, written without the stability tricks (max-shifted
log-sum-exp, softplus branch selection) so the two routes share no code and
no failure modes. On extreme inputs the naive forms are allowed to overflow;
the production path is not, and tests exploit that asymmetry.

This module imports nothing from the rest of the package. Hyperparameters
arrive as any object exposing alpha/tau/beta_u/gamma/lambda_temp/lambda1/
lambda2 attributes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

REL_ERR_FLOOR = 1e-8


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)


# ---------------------------------------------------------------------------
# Naive network forwards
# ---------------------------------------------------------------------------

def reference_mlp(x, w1, b1, w2, b2):
    """linear -> ReLU -> linear with torch-convention (out, in) weight layout."""
    h = np.maximum(x @ w1.T + b1, 0.0)
    return h @ w2.T + b2


def reference_gaussian_head(x, w1, b1, w_mu, b_mu, w_lv, b_lv, clamp=(-8.0, 8.0)):
    h = np.maximum(x @ w1.T + b1, 0.0)
    mu = h @ w_mu.T + b_mu
    log_var = np.clip(h @ w_lv.T + b_lv, clamp[0], clamp[1])
    return mu, log_var


def reference_condition(h_global, pooled, global_weights, token_weights):
    """Concatenation of the two branch MLPs; weights are (w1, b1, w2, b2) tuples."""
    return np.concatenate(
        [reference_mlp(h_global, *global_weights), reference_mlp(pooled, *token_weights)],
        axis=-1,
    )


def reference_gaussian_kl(mu_q, log_var_q, mu_p, log_var_p):
    var_q = np.exp(log_var_q)
    var_p = np.exp(log_var_p)
    terms = np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0
    return 0.5 * terms.sum(axis=-1)


def reference_elbo_mean(x, c, enc, dec, prior, beta):
    """Deterministic (posterior-mean) ELBO; enc/prior are gaussian-head weight
    tuples, dec an MLP weight tuple. Returns (recon_logprob, kl, elbo)."""
    mu_q, log_var_q = reference_gaussian_head(np.concatenate([x, c], axis=-1), *enc)
    mu_d = reference_mlp(np.concatenate([mu_q, c], axis=-1), *dec)
    recon = -0.5 * ((x - mu_d) ** 2).sum(axis=-1)
    mu_p, log_var_p = reference_gaussian_head(c, *prior)
    kl = reference_gaussian_kl(mu_q, log_var_q, mu_p, log_var_p)
    return recon, kl, recon - beta * kl


# ---------------------------------------------------------------------------
# Naive losses
# ---------------------------------------------------------------------------

def reference_losses(pos_energy, neg_energies, neg_sims, u, elbo_pos,
                     mu_q_pos, prototypes, pos_index, hyper):
    """Direct transcription of the listwise, prototype, and total losses.

    All inputs are numpy float64 batches: pos_energy/u/elbo_pos (B,),
    neg_energies/neg_sims (B, K), mu_q_pos (B, Dz), prototypes (C, Dz),
    pos_index (B,) integer. Returns {"l_scale", "l_proto", "total"}; values
    may be non-finite when the naive exponentials overflow.
    """
    pos_energy = np.asarray(pos_energy, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        biased = np.asarray(neg_energies, dtype=np.float64) + hyper.alpha * np.asarray(neg_sims, dtype=np.float64)
        e_neg = np.log(np.exp(biased).sum(axis=-1))
        gap = pos_energy - e_neg + hyper.tau - hyper.beta_u * u
        l_scale = float(np.mean(np.exp(-hyper.gamma * u) * np.log1p(np.exp(gap))))

        mu = np.asarray(mu_q_pos, dtype=np.float64)
        protos = np.asarray(prototypes, dtype=np.float64)
        norms = np.maximum(
            np.linalg.norm(mu, axis=-1)[:, None] * np.linalg.norm(protos, axis=-1)[None, :], 1e-8
        )
        sims = (mu @ protos.T) / norms
        logits = sims / hyper.lambda_temp
        probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        b = mu.shape[0]
        l_proto = float(np.mean(-np.log(probs[np.arange(b), np.asarray(pos_index)])))

        total = float(-np.mean(np.asarray(elbo_pos, dtype=np.float64))
                      + hyper.lambda1 * l_scale + hyper.lambda2 * l_proto)
    return {"l_scale": l_scale, "l_proto": l_proto, "total": total}


# ---------------------------------------------------------------------------
# Monte-Carlo KL
# ---------------------------------------------------------------------------

def mc_kl(mu_q, log_var_q, mu_p, log_var_p, n: int, seed: int) -> tuple[float, float]:
    """Estimate KL(q || p) from n posterior samples; returns (estimate, standard error)."""
    if n < 10_000:
        raise ValueError("mc_kl needs at least 1e4 samples for a usable standard error")
    rng = np.random.default_rng(seed)
    mu_q = np.asarray(mu_q, dtype=np.float64)
    log_var_q = np.asarray(log_var_q, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    log_var_p = np.asarray(log_var_p, dtype=np.float64)

    z = mu_q + np.exp(0.5 * log_var_q) * rng.standard_normal((n, mu_q.shape[-1]))

    def log_pdf(mu, log_var):
        return -0.5 * (np.log(2.0 * np.pi) + log_var + (z - mu) ** 2 / np.exp(log_var)).sum(axis=-1)

    vals = log_pdf(mu_q, log_var_q) - log_pdf(mu_p, log_var_p)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))


# ---------------------------------------------------------------------------
# Finite-difference gradients
# ---------------------------------------------------------------------------

@dataclass
class FdGradients:
    grads: dict[str, np.ndarray]
    kink_crossings: dict[str, np.ndarray]  # bool, True where the +/- signatures disagree
    nonfinite: dict[str, np.ndarray]       # bool, True where either evaluation was non-finite


def fd_gradient(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5) -> FdGradients:
    """Central differences per coordinate in float64.

    ``loss_fn`` maps a name->array dict to either a float or a
    (float, signature) pair; the signature is any array whose sign pattern
    changes exactly when the evaluation point crosses a kink. Coordinates
    whose two evaluation points disagree in signature are flagged, because
    the central quotient is meaningless across a non-differentiable point.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def call(p):
        out = loss_fn(p)
        if isinstance(out, tuple):
            return float(out[0]), np.asarray(out[1], dtype=np.float64)
        return float(out), None

    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {k: np.zeros_like(v) for k, v in work.items()}
    crossings = {k: np.zeros(v.shape, dtype=bool) for k, v in work.items()}
    nonfinite = {k: np.zeros(v.shape, dtype=bool) for k, v in work.items()}

    for name, values in work.items():
        flat = values.reshape(-1)
        g = grads[name].reshape(-1)
        cross = crossings[name].reshape(-1)
        bad = nonfinite[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus, sig_plus = call(work)
            flat[i] = orig - step
            f_minus, sig_minus = call(work)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                bad[i] = True
            if sig_plus is not None and np.any(np.sign(sig_plus) != np.sign(sig_minus)):
                cross[i] = True
    return FdGradients(grads=grads, kink_crossings=crossings, nonfinite=nonfinite)


@dataclass
class GradCheckReport:
    """Comparison of analytic vs finite-difference gradients, per parameter."""

    threshold: float
    per_param: dict[str, float]       # max relative error over checked coordinates
    worst_param: str
    worst_error: float
    n_excluded: int
    excluded_coords: dict[str, list[int]]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "per_param": self.per_param,
            "worst_param": self.worst_param,
            "worst_error": self.worst_error,
            "n_excluded": self.n_excluded,
            "excluded_coords": self.excluded_coords,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def grad_check(analytic: dict[str, np.ndarray], fd: FdGradients, threshold: float = 1e-4) -> GradCheckReport:
    """Build the certification report; excluded coordinates do not count."""
    per_param: dict[str, float] = {}
    excluded: dict[str, list[int]] = {}
    n_excluded = 0
    worst_param, worst_error = "", 0.0
    for name, fd_grad in fd.grads.items():
        skip = (fd.kink_crossings[name] | fd.nonfinite[name]).reshape(-1)
        idx = np.flatnonzero(skip)
        if idx.size:
            excluded[name] = [int(i) for i in idx]
            n_excluded += int(idx.size)
        err = relative_error(np.asarray(analytic[name], dtype=np.float64), fd_grad).reshape(-1)
        err[skip] = 0.0
        max_err = float(err.max()) if err.size else 0.0
        per_param[name] = max_err
        if max_err >= worst_error:
            worst_param, worst_error = name, max_err
    return GradCheckReport(
        threshold=threshold,
        per_param=per_param,
        worst_param=worst_param,
        worst_error=worst_error,
        n_excluded=n_excluded,
        excluded_coords=excluded,
        passed=bool(worst_error < threshold),
    )
