"""Deterministic zero-shot inference: per-class ELBO ranking and metrics.

Inference is a pure grid: one encoder and one decoder forward per
(sample, candidate) pair, latent fixed at the posterior mean, no randomness
consumed. Predictions take the candidate with the highest ELBO; ties go to
the lowest class index.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .cvae import EVAL_MEAN
from .databank import FeatureBank
from .model import prepare_text
from .trainer import ModelState

UNSEEN_TEST = "unseen_test"
SEEN_HOLDOUT = "seen_holdout"
CSV_HEADER = ["sample_id", "true_label", "candidate", "elbo", "recon", "kl", "energy", "predicted"]


@dataclass
class EnergyTable:
    """Per-sample, per-candidate ELBO breakdown plus the resulting predictions."""

    candidate_classes: np.ndarray  # (C,) int64, ascending
    sample_ids: np.ndarray         # (N,) int64 row index into the source bank
    true_labels: np.ndarray        # (N,) int64
    elbo: np.ndarray               # (N, C) float32
    recon_logprob: np.ndarray      # (N, C) float32
    kl: np.ndarray                 # (N, C) float32
    energy: np.ndarray             # (N, C) float32
    predictions: np.ndarray        # (N,) int64

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predictions == self.true_labels))


def _candidate_conditions(state: ModelState, bank: FeatureBank, candidates: np.ndarray):
    text = prepare_text(bank, state.model.dtype)
    ids = torch.from_numpy(candidates)
    with torch.no_grad():
        cond = state.model.condition_classes(text, ids)
    return cond


def _energy_grid(state: ModelState, features: np.ndarray, cond: torch.Tensor):
    x = torch.from_numpy(np.ascontiguousarray(features)).to(state.model.dtype)
    with torch.no_grad():
        br = state.model.elbo(x.unsqueeze(1), cond.unsqueeze(0), beta=1.0, mode=EVAL_MEAN)
    return br


def predict(x_s: np.ndarray, candidates: np.ndarray, state: ModelState, bank: FeatureBank):
    """Predicted class for one feature vector plus its per-candidate energy row."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate set")
    if candidates.min() < 0 or candidates.max() >= bank.n_classes:
        raise ValueError(f"candidate outside class range [0, {bank.n_classes})")
    cond = _candidate_conditions(state, bank, candidates)
    br = _energy_grid(state, np.asarray(x_s, dtype=np.float32).reshape(1, -1), cond)
    elbo = br.elbo.numpy()[0]
    winner = int(candidates[int(np.argmax(elbo))])  # argmax takes the first max: lowest index wins ties
    row = {
        "candidates": candidates,
        "elbo": elbo,
        "recon": br.recon_logprob.numpy()[0],
        "kl": br.kl.numpy()[0],
        "energy": br.energy.numpy()[0],
    }
    return winner, row


def evaluate(bank: FeatureBank, state: ModelState, partition: str) -> tuple[float, EnergyTable]:
    """Top-1 accuracy over one partition, candidates restricted to its class set.

    ``unseen_test`` scores samples labeled with unseen classes against the
    unseen candidates (the zero-shot protocol); ``seen_holdout`` is the
    sanity counterpart over seen classes. Candidates are taken in ascending
    class order, so the first-maximum tie break lands on the lowest index.
    """
    if partition == UNSEEN_TEST:
        class_set = np.sort(np.asarray(bank.unseen_classes, dtype=np.int64))
    elif partition == SEEN_HOLDOUT:
        class_set = np.sort(np.asarray(bank.seen_classes, dtype=np.int64))
    else:
        raise ValueError(f"unknown partition {partition!r}")
    rows = np.flatnonzero(np.isin(bank.labels.astype(np.int64), class_set))
    if rows.size == 0:
        raise ValueError(f"partition {partition!r} holds no samples")

    cap = os.environ.get("SCALE_THREADS")
    old_threads = torch.get_num_threads()
    if cap is not None:
        torch.set_num_threads(max(1, min(old_threads, int(cap))))
    try:
        cond = _candidate_conditions(state, bank, class_set)
        br = _energy_grid(state, bank.features[rows], cond)
    finally:
        if cap is not None:
            torch.set_num_threads(old_threads)

    elbo = br.elbo.numpy().astype(np.float32)
    predictions = class_set[np.argmax(elbo, axis=1)]
    table = EnergyTable(
        candidate_classes=class_set,
        sample_ids=rows.astype(np.int64),
        true_labels=bank.labels[rows].astype(np.int64),
        elbo=elbo,
        recon_logprob=br.recon_logprob.numpy().astype(np.float32),
        kl=br.kl.numpy().astype(np.float32),
        energy=br.energy.numpy().astype(np.float32),
        predictions=predictions.astype(np.int64),
    )
    return table.accuracy, table


def export_energies(table: EnergyTable, path: str | Path) -> None:
    """Write the table as CSV, sample-major, candidates in table order.

    Floats are written with repr-level precision so a re-import reproduces
    the stored float32 values (and hence the argmax predictions) exactly.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(table.sample_ids.shape[0]):
            for j, cand in enumerate(table.candidate_classes):
                writer.writerow([
                    int(table.sample_ids[i]),
                    int(table.true_labels[i]),
                    int(cand),
                    repr(float(table.elbo[i, j])),
                    repr(float(table.recon_logprob[i, j])),
                    repr(float(table.kl[i, j])),
                    repr(float(table.energy[i, j])),
                    int(table.predictions[i]),
                ])
