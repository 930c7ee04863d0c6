"""Feature bank ingestion, validation, persistence, and synthesis.

A bank holds everything the engine ever sees: per-sample feature vectors with
class labels, per-class text embeddings (one global vector plus a ragged
token-level array per class), and the seen/unseen class split. Banks live on
disk as a JSON manifest next to raw little-endian arrays so the format is
bit-exact and readable from any language.

Directory layout (all multi-byte values little-endian):
    manifest.json    {version, n_samples, d_s, d_t, class_names, seen,
                      unseen, token_lengths}
    features.f32     n_samples x d_s float32, row-major
    labels.u32       n_samples uint32
    text_global.f32  n_classes x d_t float32, row-major
    text_tokens.f32  concatenated L_y x d_t float32 blocks, class index order
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
_MANIFEST_KEYS = ("version", "n_samples", "d_s", "d_t", "class_names", "seen", "unseen", "token_lengths")


class BankFormatError(ValueError):
    """A bank directory or in-memory bank violates the format contract."""


@dataclass(frozen=True)
class FeatureBank:
    """Immutable container for one dataset: features, labels, text, split."""

    features: np.ndarray            # (N, d_s) float32
    labels: np.ndarray              # (N,) uint32
    class_names: list[str]
    text_global: np.ndarray         # (C, d_t) float32
    text_tokens: list[np.ndarray]   # per class: (L_y, d_t) float32
    seen_classes: np.ndarray        # (n_seen,) int64
    unseen_classes: np.ndarray      # (n_unseen,) int64

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return self.text_global.shape[0]

    @property
    def d_s(self) -> int:
        return self.features.shape[1]

    @property
    def d_t(self) -> int:
        return self.text_global.shape[1]

    def seen_mask(self) -> np.ndarray:
        """Boolean row mask selecting samples whose label is a seen class."""
        return np.isin(self.labels.astype(np.int64), self.seen_classes)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic bank generator."""

    num_seen: int = 12
    num_unseen: int = 4
    d_s: int = 32
    d_t: int = 16
    samples_per_class: int = 50
    noise_scale: float = 0.3
    mixing_rank: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.num_seen < 2 or self.num_unseen < 2:
            raise BankFormatError(
                f"need at least 2 seen and 2 unseen classes, got {self.num_seen}/{self.num_unseen}"
            )
        if self.d_s <= 0 or self.d_t <= 0:
            raise BankFormatError(f"dimensions must be positive, got d_s={self.d_s}, d_t={self.d_t}")
        if self.samples_per_class < 1:
            raise BankFormatError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not (self.noise_scale >= 0.0 and math.isfinite(self.noise_scale)):
            raise BankFormatError(f"noise_scale must be finite and >= 0, got {self.noise_scale}")
        if not (1 <= self.mixing_rank <= min(self.d_s, self.d_t)):
            raise BankFormatError(
                f"mixing_rank must lie in [1, min(d_s, d_t)] = [1, {min(self.d_s, self.d_t)}], got {self.mixing_rank}"
            )


def _check_finite(arr: np.ndarray, where: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise BankFormatError(f"non-finite value in {where} at element {idx} (byte offset {idx * 4})")


def validate_bank(bank: FeatureBank) -> None:
    """Check every bank invariant; raise :class:`BankFormatError` on the first violation."""
    feats, labels = bank.features, bank.labels
    if feats.ndim != 2 or feats.shape[1] < 1:
        raise BankFormatError(f"features must be (N, d_s) with d_s > 0, got shape {feats.shape}")
    if bank.text_global.ndim != 2 or bank.text_global.shape[1] < 1:
        raise BankFormatError(f"text_global must be (C, d_t) with d_t > 0, got shape {bank.text_global.shape}")
    c = bank.n_classes
    if len(bank.class_names) != c:
        raise BankFormatError(f"{len(bank.class_names)} class names for {c} classes")
    if len(bank.text_tokens) != c:
        raise BankFormatError(f"{len(bank.text_tokens)} token arrays for {c} classes")
    for y, tok in enumerate(bank.text_tokens):
        if tok.ndim != 2 or tok.shape[0] < 1 or tok.shape[1] != bank.d_t:
            raise BankFormatError(
                f"token array for class {y} must be (L_y >= 1, {bank.d_t}), got shape {tok.shape}"
            )
    if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
        raise BankFormatError(f"labels shape {labels.shape} does not match {feats.shape[0]} samples")
    if labels.size and int(labels.max()) >= c:
        bad = int(np.flatnonzero(labels.astype(np.int64) >= c)[0])
        raise BankFormatError(f"label {int(labels[bad])} at row {bad} outside class range [0, {c})")

    seen = np.asarray(bank.seen_classes, dtype=np.int64)
    unseen = np.asarray(bank.unseen_classes, dtype=np.int64)
    for name, arr in (("seen", seen), ("unseen", unseen)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise BankFormatError(f"{name} class index outside [0, {c})")
        if len(set(arr.tolist())) != arr.size:
            raise BankFormatError(f"duplicate indices in {name} class set")
    overlap = np.intersect1d(seen, unseen)
    if overlap.size:
        raise BankFormatError(f"seen and unseen class sets overlap: {overlap.tolist()}")
    present = np.unique(labels.astype(np.int64))
    covered = np.union1d(seen, unseen)
    missing = np.setdiff1d(present, covered)
    if missing.size:
        raise BankFormatError(f"labels {missing.tolist()} belong to neither split")

    _check_finite(feats, "features")
    _check_finite(bank.text_global, "text_global")
    for y, tok in enumerate(bank.text_tokens):
        _check_finite(tok, f"text_tokens[class {y}]")


def _read_array(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise BankFormatError(f"missing bank file: {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise BankFormatError(
            f"{path.name}: expected {expected} bytes for shape {shape}, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def load_bank(path: str | Path) -> FeatureBank:
    """Load and fully validate a bank directory."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BankFormatError(f"missing bank file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BankFormatError(f"{manifest_path.name}: invalid JSON ({exc})") from exc

    unknown = set(manifest) - set(_MANIFEST_KEYS)
    if unknown:
        raise BankFormatError(f"{manifest_path.name}: unknown keys {sorted(unknown)}")
    missing = set(_MANIFEST_KEYS) - set(manifest)
    if missing:
        raise BankFormatError(f"{manifest_path.name}: missing keys {sorted(missing)}")
    if manifest["version"] != MANIFEST_VERSION:
        raise BankFormatError(f"unsupported bank version {manifest['version']}")

    n = int(manifest["n_samples"])
    d_s = int(manifest["d_s"])
    d_t = int(manifest["d_t"])
    names = [str(s) for s in manifest["class_names"]]
    lengths = [int(v) for v in manifest["token_lengths"]]
    c = len(names)
    if len(lengths) != c:
        raise BankFormatError(f"{manifest_path.name}: {len(lengths)} token_lengths for {c} classes")

    features = _read_array(root / "features.f32", "<f4", (n, d_s))
    labels = _read_array(root / "labels.u32", "<u4", (n,))
    text_global = _read_array(root / "text_global.f32", "<f4", (c, d_t))
    flat_tokens = _read_array(root / "text_tokens.f32", "<f4", (sum(lengths), d_t))
    tokens: list[np.ndarray] = []
    row = 0
    for l in lengths:
        tokens.append(flat_tokens[row : row + l].copy())
        row += l

    bank = FeatureBank(
        features=features,
        labels=labels,
        class_names=names,
        text_global=text_global,
        text_tokens=tokens,
        seen_classes=np.asarray(manifest["seen"], dtype=np.int64),
        unseen_classes=np.asarray(manifest["unseen"], dtype=np.int64),
    )
    validate_bank(bank)
    return bank


def save_bank(bank: FeatureBank, path: str | Path) -> None:
    """Write a validated bank; identical banks produce byte-identical directories."""
    validate_bank(bank)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    manifest = {
        "version": MANIFEST_VERSION,
        "n_samples": int(bank.n_samples),
        "d_s": int(bank.d_s),
        "d_t": int(bank.d_t),
        "class_names": list(bank.class_names),
        "seen": [int(v) for v in bank.seen_classes],
        "unseen": [int(v) for v in bank.unseen_classes],
        "token_lengths": [int(t.shape[0]) for t in bank.text_tokens],
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    (root / "features.f32").write_bytes(np.ascontiguousarray(bank.features, dtype="<f4").tobytes())
    (root / "labels.u32").write_bytes(np.ascontiguousarray(bank.labels, dtype="<u4").tobytes())
    (root / "text_global.f32").write_bytes(np.ascontiguousarray(bank.text_global, dtype="<f4").tobytes())
    flat = np.concatenate([np.ascontiguousarray(t, dtype="<f4") for t in bank.text_tokens], axis=0)
    (root / "text_tokens.f32").write_bytes(flat.tobytes())


def synthesize_bank(spec: SynthSpec) -> FeatureBank:
    """Generate a bank whose class feature means are a fixed linear image of the text.

    Every class (seen or unseen) gets a text embedding h_y drawn from a seeded
    standard normal, a feature mean W @ h_y through one shared random
    rank-limited map W, and samples mean + noise_scale * eps. Because W is
    shared, unseen-class features are predictable from text alone, which is
    the signal that makes zero-shot transfer on the bank possible. The output
    is a pure function of the spec.
    """
    spec.validate()
    c = spec.num_seen + spec.num_unseen
    rng = np.random.default_rng(spec.seed)

    # Draw order is fixed; reordering would silently change every seeded bank.
    h = rng.standard_normal((c, spec.d_t))
    a = rng.standard_normal((spec.d_s, spec.mixing_rank))
    b = rng.standard_normal((spec.mixing_rank, spec.d_t))
    w = (a @ b) / math.sqrt(spec.mixing_rank * spec.d_t)
    means = h @ w.T  # (C, d_s)

    token_lengths = rng.integers(3, 9, size=c)
    tokens = [
        (h[y] + rng.standard_normal((int(token_lengths[y]), spec.d_t))).astype(np.float32)
        for y in range(c)
    ]

    n_per = spec.samples_per_class
    features = np.empty((c * n_per, spec.d_s), dtype=np.float32)
    for y in range(c):
        block = means[y] + spec.noise_scale * rng.standard_normal((n_per, spec.d_s))
        features[y * n_per : (y + 1) * n_per] = block.astype(np.float32)
    labels = np.repeat(np.arange(c, dtype=np.uint32), n_per)

    bank = FeatureBank(
        features=features,
        labels=labels,
        class_names=[f"class_{y:03d}" for y in range(c)],
        text_global=h.astype(np.float32),
        text_tokens=tokens,
        seen_classes=np.arange(spec.num_seen, dtype=np.int64),
        unseen_classes=np.arange(spec.num_seen, c, dtype=np.int64),
    )
    validate_bank(bank)
    return bank
