"""Optimization driver: schedules, parameter updates, checkpoints, metrics.

Everything here is built for bitwise reproducibility on one platform: a
single counted random stream owns all stochasticity (init, shuffling, latent
noise), the update rule keeps its moment tensors in an explicit name-keyed
table, and checkpoints serialize that table verbatim so a resumed run replays
the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import math
import os
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .databank import FeatureBank
from .diffcore import NumericalError, RandomStream, backward
from .model import ModelDims, RecognitionModel, prepare_text
from .objectives import ScaleHyper, batch_losses

CHECKPOINT_MAGIC = b"SCL1"
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.scl"
METRICS_NAME = "metrics.jsonl"

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    """Checkpoint file is missing, truncated, or structurally wrong."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    beta_cycles: int = 4
    beta_max: float = 1.0
    seed: int = 0
    hyper: ScaleHyper = field(default_factory=ScaleHyper)
    d_z: int = 64
    d_c: int = 256

    def validate(self) -> None:
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be positive and finite, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.beta_cycles < 1:
            raise ValueError(f"beta_cycles must be >= 1, got {self.beta_cycles}")
        if not (0.0 <= self.beta_max <= 1.0):
            raise ValueError(f"beta_max must lie in [0, 1], got {self.beta_max}")
        if self.d_z < 1:
            raise ValueError(f"d_z must be >= 1, got {self.d_z}")
        if self.d_c < 2 or self.d_c % 2:
            raise ValueError(f"d_c must be an even count >= 2, got {self.d_c}")
        self.hyper.validate()


def beta_schedule(step: int, total_steps: int, cycles: int, beta_max: float) -> float:
    """Cyclical annealing weight: rises linearly from 0 to beta_max inside each cycle.

    Steps are partitioned into ``cycles`` (near-)equal segments; the first
    step of a segment maps to 0 and its last step to exactly beta_max.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    bounds = [(i * total_steps) // cycles for i in range(cycles + 1)]
    k = bisect_right(bounds, step) - 1
    lo, hi = bounds[k], bounds[k + 1]
    denom = hi - lo - 1
    if denom == 0:
        return beta_max
    return beta_max * (step - lo) / denom


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr (step 0) to exactly 0 (final step), no warmup."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


@dataclass
class ModelState:
    """Trainable model plus everything needed to continue training bitwise."""

    model: RecognitionModel
    moment1: dict[str, Tensor]
    moment2: dict[str, Tensor]
    step: int
    stream: RandomStream


def init_state(dims: ModelDims, seed: int, dtype: torch.dtype = torch.float32) -> ModelState:
    stream = RandomStream(seed)
    model = RecognitionModel(dims, stream.generator, dtype)
    params = model.param_dict()
    return ModelState(
        model=model,
        moment1={n: torch.zeros_like(p) for n, p in params.items()},
        moment2={n: torch.zeros_like(p) for n, p in params.items()},
        step=0,
        stream=stream,
    )


def adamw_step(state: ModelState, lr: float, weight_decay: float) -> None:
    """One decoupled-weight-decay adaptive-moment update over all parameters.

    Decay multiplies every parameter by (1 - lr * weight_decay) regardless of
    whether the loss reached it; the moment update then consumes ``.grad``,
    which the backward contract guarantees is present (zero if unreachable).
    """
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in state.model.param_dict().items():
            g = p.grad
            p.mul_(1.0 - lr * weight_decay)
            m = state.moment1[name]
            v = state.moment2[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(ADAM_EPS)
            p.addcdiv_(m / bc1, denom, value=-lr)
    state.step = t


def _check_params_finite(model: RecognitionModel) -> None:
    for name, p in model.param_dict().items():
        if not bool(torch.isfinite(p).all()):
            raise NumericalError(f"non-finite parameter after update: {name}")


def train(
    bank: FeatureBank,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume: ModelState | None = None,
    max_epochs: int | None = None,
) -> tuple[ModelState, list[dict]]:
    """Train on the seen partition; write metrics.jsonl and checkpoint.scl.

    Only feature rows whose label is a seen class are ever read. One metrics
    record is appended per epoch (values averaged over the epoch's steps) and
    the checkpoint is atomically replaced at each epoch end, so a mid-epoch
    numerical abort leaves the last completed epoch's state on disk.

    ``resume`` continues a run produced with the same (bank, cfg);
    ``max_epochs`` bounds how many epochs this invocation performs while
    schedules still span the configured total, modelling interruption.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    seen_rows = np.flatnonzero(bank.seen_mask())
    if seen_rows.size == 0:
        raise ValueError("empty seen partition: no training samples")
    features = torch.from_numpy(np.ascontiguousarray(bank.features[seen_rows]))
    labels = torch.from_numpy(bank.labels[seen_rows].astype(np.int64))

    dims = ModelDims(d_s=bank.d_s, d_t=bank.d_t, d_z=cfg.d_z, proj_out=cfg.d_c // 2)
    if resume is None:
        state = init_state(dims, cfg.seed)
    else:
        state = resume
        if state.model.dims != dims:
            raise ValueError(f"resume dims {state.model.dims} do not match config dims {dims}")

    n = int(features.shape[0])
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    start_epoch = state.step // steps_per_epoch
    if state.step % steps_per_epoch:
        raise ValueError("checkpoint step is not at an epoch boundary for this batch size")
    end_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)

    text = prepare_text(bank, state.model.dtype)
    params = state.model.param_dict()
    metrics_path = out / METRICS_NAME
    if resume is None and metrics_path.exists():
        metrics_path.unlink()

    records: list[dict] = []
    for epoch in range(start_epoch, end_epoch):
        perm = state.stream.permutation(n)
        sums = {"loss_total": 0.0, "neg_elbo": 0.0, "l_scale": 0.0, "l_proto": 0.0,
                "mean_u": 0.0, "beta": 0.0, "lr": 0.0}
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0 : b0 + cfg.batch_size]
            beta = beta_schedule(state.step, total_steps, cfg.beta_cycles, cfg.beta_max)
            lr = lr_schedule(state.step, total_steps, cfg.lr)
            result = batch_losses(
                state.model, features[idx], labels[idx], text, beta, cfg.hyper,
                stream=state.stream,
            )
            backward(result.total, params, result.intermediates)
            adamw_step(state, lr, cfg.weight_decay)
            _check_params_finite(state.model)
            sums["loss_total"] += float(result.total.detach())
            sums["neg_elbo"] += float(result.neg_elbo.detach())
            sums["l_scale"] += float(result.l_scale.detach())
            sums["l_proto"] += float(result.l_proto.detach())
            sums["mean_u"] += result.mean_u
            sums["beta"] += beta
            sums["lr"] += lr
        record = {"epoch": epoch}
        record.update({k: sums[k] / steps_per_epoch for k in
                       ("loss_total", "neg_elbo", "l_scale", "l_proto", "mean_u", "beta", "lr")})
        records.append(record)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        save_checkpoint(state, out / CHECKPOINT_NAME)
    return state, records


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON header, then a named tensor
# table. Every multi-byte value is little-endian.
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1, torch.uint8: 2, torch.int64: 3}
_TAG_DTYPES = {0: ("<f4", torch.float32), 1: ("<f8", torch.float64),
               2: ("u1", torch.uint8), 3: ("<i8", torch.int64)}


def _tensor_bytes(t: Tensor) -> bytes:
    arr = t.detach().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _pack_tensor(name: str, t: Tensor) -> bytes:
    tag = _DTYPE_TAGS[t.dtype]
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", tag, t.dim())
    head += struct.pack(f"<{t.dim()}Q", *t.shape) if t.dim() else b""
    return head + _tensor_bytes(t)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Serialize params, optimizer moments, step counter, and RNG state."""
    path = Path(path)
    tensors: list[tuple[str, Tensor]] = []
    for name, p in state.model.param_dict().items():
        tensors.append((f"param/{name}", p))
    for name in state.moment1:
        tensors.append((f"moment1/{name}", state.moment1[name]))
    for name in state.moment2:
        tensors.append((f"moment2/{name}", state.moment2[name]))
    tensors.append(("rng_state", state.stream.get_state()))

    dims = state.model.dims
    header = {
        "d_s": dims.d_s, "d_t": dims.d_t, "d_z": dims.d_z, "proj_out": dims.proj_out,
        "dtype": _DTYPE_TAGS[state.model.dtype],
        "step": state.step, "rng_draws": state.stream.draws, "n_tensors": len(tensors),
    }
    header_b = json.dumps(header).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_b)) + header_b
    for name, t in tensors:
        blob += _pack_tensor(name, t)

    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> ModelState:
    """Rebuild a ModelState; the result continues training bitwise."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    reader = _Reader(path.read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic bytes, not a checkpoint")
    version, header_len = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported checkpoint version {version}")
    header = json.loads(reader.take(header_len).decode("utf-8"))

    tensors: dict[str, Tensor] = {}
    for _ in range(int(header["n_tensors"])):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, ndim = reader.unpack("<BB")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        np_dtype, torch_dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(count * np.dtype(np_dtype).itemsize)
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(torch_dtype)
    if reader.pos != len(reader.buf):
        raise CheckpointError(f"{path.name}: trailing bytes after tensor table")

    dims = ModelDims(d_s=int(header["d_s"]), d_t=int(header["d_t"]),
                     d_z=int(header["d_z"]), proj_out=int(header["proj_out"]))
    dtype = _TAG_DTYPES[int(header["dtype"])][1]
    model = RecognitionModel(dims, generator=torch.Generator(), dtype=dtype)
    params = model.param_dict()

    expected = {f"param/{n}" for n in params}
    expected |= {f"moment1/{n}" for n in params} | {f"moment2/{n}" for n in params}
    expected.add("rng_state")
    unknown = set(tensors) - expected
    if unknown:
        raise CheckpointError(f"{path.name}: unknown tensor names {sorted(unknown)}")
    missing = expected - set(tensors)
    if missing:
        raise CheckpointError(f"{path.name}: missing tensors {sorted(missing)}")

    with torch.no_grad():
        for name, p in params.items():
            stored = tensors[f"param/{name}"]
            if tuple(stored.shape) != tuple(p.shape):
                raise CheckpointError(f"{path.name}: shape mismatch for {name}")
            p.copy_(stored)
    stream = RandomStream()
    stream.set_state(tensors["rng_state"])
    stream.draws = int(header["rng_draws"])
    return ModelState(
        model=model,
        moment1={n: tensors[f"moment1/{n}"] for n in params},
        moment2={n: tensors[f"moment2/{n}"] for n in params},
        step=int(header["step"]),
        stream=stream,
    )
