"""Multimodal datasets: synthetic generation, missing-modality protocol, disk I/O.

Presence is stored as a boolean matrix ``patterns[N, M]`` (True = modality
observed). Modality indices are 0-based everywhere in the code.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import (
    DataShapeError,
    DimensionError,
    HeaderError,
    LabelRangeError,
    ManifestError,
    MissingFileError,
    ValidationError,
)

MAGIC = b"MMRS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class MissingPattern:
    """Which of the M modalities are present for one sample."""

    presence: tuple[bool, ...]

    def __post_init__(self):
        if len(self.presence) < 2:
            raise ValidationError("a missing pattern needs at least two modalities")
        if not any(self.presence):
            raise ValidationError("a sample must keep at least one modality")

    @classmethod
    def complete(cls, m: int) -> "MissingPattern":
        return cls((True,) * m)

    @classmethod
    def missing(cls, m: int, absent: Sequence[int]) -> "MissingPattern":
        return cls(tuple(j not in set(absent) for j in range(m)))

    @property
    def num_modalities(self) -> int:
        return len(self.presence)

    @property
    def is_complete(self) -> bool:
        return all(self.presence)

    @property
    def bits(self) -> int:
        return sum(1 << j for j, p in enumerate(self.presence) if p)

    def vector(self) -> np.ndarray:
        return np.array(self.presence, dtype=np.float64)


def all_patterns(m: int) -> list[MissingPattern]:
    """Every valid pattern for ``m`` modalities, ordered by bitmask value."""
    return [MissingPattern(tuple(bool(b >> j & 1) for j in range(m))) for b in range(1, 2**m)]


def pattern_index(presence: np.ndarray) -> np.ndarray:
    """Map boolean rows [.., M] to 0-based pattern ids (bitmask - 1)."""
    weights = 1 << np.arange(presence.shape[-1])
    return (presence.astype(np.int64) * weights).sum(-1) - 1


@dataclass
class ModalityBatch:
    features: list[np.ndarray]
    patterns: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass
class MultimodalDataset:
    """Per-modality raw feature blocks ``[N, tokens_m, dim_m]`` plus labels.

    ``patterns`` defaults to all-present. Features of absent modalities stay
    in memory; only the presence matrix marks them missing.
    """

    features: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    patterns: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.labels)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for f in self.features:
            if f.ndim != 3 or f.shape[0] != n:
                raise DimensionError(f"feature block {f.shape} does not match {n} samples")
        if self.patterns is None:
            self.patterns = np.ones((n, len(self.features)), dtype=bool)
        if self.patterns.shape != (n, len(self.features)):
            raise DimensionError(f"patterns {self.patterns.shape} vs ({n}, {len(self.features)})")
        if not self.names:
            self.names = [f"m{j}" for j in range(len(self.features))]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(f.shape[1], f.shape[2]) for f in self.features]

    def subset(self, idx: np.ndarray) -> "MultimodalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultimodalDataset(
            [f[idx] for f in self.features], self.labels[idx], self.num_classes, self.patterns[idx], list(self.names)
        )

    def with_patterns(self, patterns: np.ndarray) -> "MultimodalDataset":
        return MultimodalDataset(self.features, self.labels, self.num_classes, patterns, list(self.names))

    def batch(self, idx: np.ndarray) -> ModalityBatch:
        return ModalityBatch([f[idx] for f in self.features], self.patterns[idx], self.labels[idx])

    def pattern_counts(self) -> dict[tuple[bool, ...], int]:
        keys, counts = np.unique(self.patterns, axis=0, return_counts=True)
        return {tuple(bool(v) for v in k): int(c) for k, c in zip(keys, counts)}


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticSpec:
    num_modalities: int = 2
    tokens: list[int] = field(default_factory=lambda: [4, 4])
    dims: list[int] = field(default_factory=lambda: [12, 12])
    num_classes: int = 6
    num_samples: int = 3000
    signal: float = 1.0
    correlation: float = 0.7
    noise: float = 0.6
    latent_dim: int = 8
    # fraction of each projection's per-token mean removed; 1 gives zero-mean
    # token directions so no single pooled summary carries the class signal
    token_centering: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_modalities < 2:
            raise ValidationError("num_modalities must be >= 2")
        if len(self.tokens) != self.num_modalities or len(self.dims) != self.num_modalities:
            raise ValidationError("tokens and dims need one entry per modality")
        if min(self.tokens) < 1 or min(self.dims) < 1:
            raise ValidationError("tokens and dims must be positive")
        if self.num_samples <= 0:
            raise ValidationError("num_samples must be positive")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValidationError("correlation must lie in [0, 1]")
        if self.noise < 0 or self.latent_dim < 1:
            raise ValidationError("noise must be >= 0 and latent_dim >= 1")
        if not 0.0 <= self.token_centering <= 1.0:
            raise ValidationError("token_centering must lie in [0, 1]")


def generate_synthetic(spec: SyntheticSpec) -> MultimodalDataset:
    """Class-prototype data with a tunable shared/private split per modality.

    For a sample of class ``c`` the latent behind modality ``m`` is
    ``signal * (rho * P[c] + (1 - rho) * Q[m, c]) + noise * (rho * e + (1 - rho) * xi_m)``,
    where ``e`` is per-sample noise common to all modalities and ``xi_m`` is
    private. Each modality maps its latent through its own random linear map
    to ``[tokens_m, dim_m]`` and adds ``noise`` scaled Gaussian feature noise.
    With ``token_centering`` the map has that share of its mean over tokens
    subtracted (modalities with one token are left alone), which keeps the
    signal in how tokens differ rather than in their average.
    """
    rng = np.random.default_rng(spec.seed)
    m, c, q, n = spec.num_modalities, spec.num_classes, spec.latent_dim, spec.num_samples
    rho = spec.correlation
    shared_proto = rng.standard_normal((c, q))
    private_proto = rng.standard_normal((m, c, q))
    projections = []
    for t, d in zip(spec.tokens, spec.dims):
        proj = rng.standard_normal((q, t, d)) / np.sqrt(q)
        if t > 1:
            proj = proj - spec.token_centering * proj.mean(axis=1, keepdims=True)
        projections.append(proj.reshape(q, t * d))
    labels = np.arange(n) % c
    rng.shuffle(labels)
    common = rng.standard_normal((n, q))
    features = []
    for j in range(m):
        latent = spec.signal * (rho * shared_proto[labels] + (1 - rho) * private_proto[j][labels])
        latent = latent + spec.noise * (rho * common + (1 - rho) * rng.standard_normal((n, q)))
        x = latent @ projections[j] + spec.noise * rng.standard_normal((n, spec.tokens[j] * spec.dims[j]))
        features.append(x.reshape(n, spec.tokens[j], spec.dims[j]))
    return MultimodalDataset(features, labels, c)


# ---------------------------------------------------------------------------
# missing-modality protocol


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def _assign_patterns(n: int, m: int, groups: list[tuple[tuple[int, ...], int]], seed: int) -> np.ndarray:
    """Shuffle sample ids, then hand out contiguous slices to each missing set."""
    perm = np.random.default_rng(seed).permutation(n)
    patterns = np.ones((n, m), dtype=bool)
    start = 0
    for absent, count in groups:
        count = min(count, n - start)
        rows = perm[start:start + count]
        for j in absent:
            patterns[rows, j] = False
        start += count
    return patterns


def missing_groups(
    n: int, m: int, eta: float, mode: str = "both", modality: int | None = None, split_rule: str = "uniform"
) -> list[tuple[tuple[int, ...], int]]:
    """Exact per-configuration counts ``[(absent modalities, count), ...]``.

    ``mode="both"`` spreads ``eta`` over every nonempty proper subset of
    modalities (two single-modality subsets when M=2). ``split_rule="paper"``
    instead gives each subset ``eta / (M**2 - 2)`` of the data, which only
    agrees with the uniform rule at M=2.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"missing rate must lie in [0, 1], got {eta}")
    if mode == "only":
        if modality is None or not 0 <= modality < m:
            raise ValidationError(f"mode 'only' needs a modality index in [0, {m})")
        return [((modality,), _round_half_up(n * eta))]
    if mode != "both":
        raise ValidationError(f"unknown missing mode {mode!r}")
    subsets = [s for r in range(1, m) for s in itertools.combinations(range(m), r)]
    if split_rule == "uniform":
        share = eta / len(subsets)
    elif split_rule == "paper":
        share = eta / (m * m - 2)
    else:
        raise ValidationError(f"unknown split rule {split_rule!r}")
    groups = []
    left = n
    for s in subsets:
        count = min(_round_half_up(n * share), left)
        groups.append((s, count))
        left -= count
    return groups


def apply_missing_protocol(
    dataset: MultimodalDataset,
    eta: float,
    mode: str = "both",
    modality: int | None = None,
    seed: int = 0,
    split_rule: str = "uniform",
) -> MultimodalDataset:
    """Mark a deterministic, exactly-sized subset of samples as incomplete."""
    groups = missing_groups(len(dataset), dataset.num_modalities, eta, mode, modality, split_rule)
    return dataset.with_patterns(_assign_patterns(len(dataset), dataset.num_modalities, groups, seed))


def apply_availability(dataset: MultimodalDataset, availability: Sequence[float], seed: int = 0) -> MultimodalDataset:
    """Per-modality availability, e.g. ``[1.0, 0.3]`` = 70% of samples lack modality 1.

    Missing sets are disjoint, so each sample lacks at most one modality and
    the overall missing rate is ``sum(1 - a)``.
    """
    m = dataset.num_modalities
    if len(availability) != m:
        raise ValidationError(f"need {m} availability values, got {len(availability)}")
    missing = [1.0 - float(a) for a in availability]
    if min(missing) < -1e-12 or sum(missing) > 1.0 + 1e-9:
        raise ValidationError(f"availability {list(availability)} is not a valid disjoint split")
    n = len(dataset)
    groups = [((j,), _round_half_up(n * f)) for j, f in enumerate(missing) if f > 0]
    return dataset.with_patterns(_assign_patterns(n, m, groups, seed))


def substitute_missing(
    encoded: Sequence[nc.Tensor],
    patterns: np.ndarray,
    strategy: str = "zero_fill",
    placeholders: Sequence[nc.Tensor] | None = None,
) -> list[nc.Tensor]:
    """Replace encoder outputs ``[B, T_m, d]`` of absent modalities.

    ``zero_fill`` writes exact zeros; ``learnable_placeholder`` writes the
    trainable ``[T_m, d]`` block for that modality. Present rows pass
    through untouched.
    """
    if strategy == "zero_fill":
        if placeholders is not None:
            raise ValidationError("zero_fill takes no placeholders")
    elif strategy == "learnable_placeholder":
        if placeholders is None or len(placeholders) != len(encoded):
            raise ValidationError("learnable_placeholder needs one placeholder per modality")
    else:
        raise ValidationError(f"unknown substitution strategy {strategy!r}")
    out = []
    for j, h in enumerate(encoded):
        present = patterns[:, j]
        if present.all():
            out.append(h)
            continue
        mask = np.broadcast_to(present[:, None, None], h.shape)
        if strategy == "zero_fill":
            out.append(nc.where(mask, h, nc.Tensor(np.zeros(h.shape[1:]))))
        else:
            ph = placeholders[j]
            if ph.shape != h.shape[1:]:
                raise DimensionError(f"placeholder {ph.shape} for modality {j} vs block {h.shape[1:]}")
            out.append(nc.where(mask, h, ph))
    return out


# ---------------------------------------------------------------------------
# splitting and disk format


def split_train_test(
    dataset: MultimodalDataset, fraction: float = 0.8, seed: int = 0
) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Class-stratified split; ``fraction`` of each class goes to train."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError("train fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = _round_half_up(len(idx) * fraction)
        train.append(idx[:k])
        test.append(idx[k:])
    return dataset.subset(np.sort(np.concatenate(train))), dataset.subset(np.sort(np.concatenate(test)))


def save_dataset(dataset: MultimodalDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    modalities = []
    for name, block in zip(dataset.names, dataset.features):
        fname = f"{name}.bin"
        with open(directory / fname, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, 0))
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
        modalities.append({"name": name, "tokens": block.shape[1], "dim": block.shape[2], "file": fname})
    (directory / "labels.txt").write_text("".join(f"{int(y)}\n" for y in dataset.labels))
    manifest = {
        "modalities": modalities,
        "labels_file": "labels.txt",
        "num_classes": int(dataset.num_classes),
        "num_samples": n,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_block(path: Path, n: int, tokens: int, dim: int) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"modality file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise HeaderError(f"{path}: truncated header")
    magic, version, count, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported version {version}")
    if count != n:
        raise DataShapeError(f"{path}: header says {count} samples, manifest says {n}")
    payload = len(raw) - _HEADER.size
    expected = n * tokens * dim * 8
    if payload != expected:
        raise DataShapeError(f"{path}: payload {payload} bytes, expected {expected} for [{n} x {tokens} x {dim}]")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(n, tokens, dim)


def load_dataset(manifest_path: str | Path) -> MultimodalDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        n = int(manifest["num_samples"])
        num_classes = int(manifest["num_classes"])
        mods = manifest["modalities"]
        labels_file = manifest["labels_file"]
        specs = [(m["name"], int(m["tokens"]), int(m["dim"]), m["file"]) for m in mods]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{manifest_path}: invalid manifest ({exc})") from exc
    root = manifest_path.parent
    features = [_read_block(root / f, n, t, d) for _, t, d, f in specs]
    labels_path = root / labels_file
    if not labels_path.exists():
        raise MissingFileError(f"labels file not found: {labels_path}")
    try:
        labels = np.array([int(line) for line in labels_path.read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise ManifestError(f"{labels_path}: non-integer label") from exc
    if len(labels) != n:
        raise DataShapeError(f"{labels_path}: {len(labels)} labels for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"{labels_path}: labels must lie in [0, {num_classes})")
    return MultimodalDataset(features, labels, num_classes, names=[s[0] for s in specs])
