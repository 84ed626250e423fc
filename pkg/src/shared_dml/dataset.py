"""Synthetic latent-factor datasets, CSV persistence and the class-disjoint split.

Every sample mixes two independent discrete factors: its class and a "shared"
attribute that recurs across classes (think colour vs. shape).  Both enter the
ambient features through fixed random linear maps, plus isotropic noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DatasetFormatError


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 20
    samples_per_class: int = 50
    num_shared_factors: int = 4
    ambient_dim: int = 8
    class_signal_scale: float = 1.0
    shared_signal_scale: float = 0.75
    noise_scale: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2 or self.num_classes % 2:
            raise ConfigError("num_classes", "must be an even integer >= 2")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class", "must be >= 2")
        if self.num_shared_factors < 1:
            raise ConfigError("num_shared_factors", "must be >= 1")
        if self.ambient_dim < 1:
            raise ConfigError("ambient_dim", "must be >= 1")
        for name in ("class_signal_scale", "shared_signal_scale", "noise_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(name, "must be finite and >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must fit in an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of samples.

    ``num_classes`` is the size of the label space: every label is in
    ``[0, num_classes)``.  A split keeps the original labels, so a test split
    only covers the upper half of that range; see ``class_ids``.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    shared_factors: Optional[np.ndarray] = None
    generator_config: Union[SynthConfig, str] = "external"

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must have one entry per feature row")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.shared_factors is not None:
            shared = np.array(self.shared_factors, dtype=np.int64, copy=True)
            if shared.shape != labels.shape:
                raise ValueError("shared_factors must have one entry per sample")
            shared.setflags(write=False)
            object.__setattr__(self, "shared_factors", shared)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_shared = (self.shared_factors is None) == (other.shared_factors is None)
        if same_shared and self.shared_factors is not None:
            same_shared = np.array_equal(self.shared_factors, other.shared_factors)
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and same_shared
        )

    @property
    def ambient_dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, mask: np.ndarray) -> "Dataset":
        shared = None if self.shared_factors is None else self.shared_factors[mask]
        return Dataset(
            self.features[mask],
            self.labels[mask],
            self.num_classes,
            shared,
            self.generator_config,
        )


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    A = cfg.ambient_dim
    class_map = rng.standard_normal((cfg.num_classes, A))
    shared_map = rng.standard_normal((cfg.num_shared_factors, A))
    # unit rows keep the scales comparable between the two factors
    class_map /= np.linalg.norm(class_map, axis=1, keepdims=True)
    shared_map /= np.linalg.norm(shared_map, axis=1, keepdims=True)

    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
    shared = rng.integers(0, cfg.num_shared_factors, size=labels.size)
    noise = rng.standard_normal((labels.size, A))
    features = (
        cfg.class_signal_scale * class_map[labels]
        + cfg.shared_signal_scale * shared_map[shared]
        + cfg.noise_scale * noise
    )
    return Dataset(features, labels, cfg.num_classes, shared, cfg)


def split_by_class(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Train on the first half of the label range, test on the rest."""
    if ds.num_classes < 2:
        raise ValueError("split_by_class needs at least 2 classes")
    cut = ds.num_classes // 2
    in_train = ds.labels < cut
    return ds.subset(in_train), ds.subset(~in_train)


def save_dataset(ds: Dataset, path) -> None:
    lines = [f"dim={ds.ambient_dim},classes={ds.num_classes}"]
    for i in range(len(ds)):
        row = [repr(float(v)) for v in ds.features[i]]
        row.append(str(int(ds.labels[i])))
        if ds.shared_factors is not None:
            row.append(str(int(ds.shared_factors[i])))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int]:
    fields = {}
    for part in line.strip().split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise DatasetFormatError(1, f"malformed header field {part!r}")
        fields[key.strip()] = value.strip()
    try:
        dim, classes = int(fields["dim"]), int(fields["classes"])
    except KeyError as exc:
        raise DatasetFormatError(1, f"header lacks {exc.args[0]!r}") from None
    except ValueError:
        raise DatasetFormatError(1, "header values must be integers") from None
    if dim < 1 or classes < 1:
        raise DatasetFormatError(1, "header values must be positive")
    return dim, classes


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(1, "missing header")
    dim, classes = _parse_header(lines[0])

    features, labels, shared = [], [], []
    has_shared = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) not in (dim + 1, dim + 2):
            raise DatasetFormatError(
                lineno, f"expected {dim + 1} or {dim + 2} columns, got {len(cells)}"
            )
        row_has_shared = len(cells) == dim + 2
        if has_shared is None:
            has_shared = row_has_shared
        elif has_shared != row_has_shared:
            raise DatasetFormatError(lineno, "inconsistent column count")
        try:
            values = [float(c) for c in cells[:dim]]
            label = int(cells[dim])
            factor = int(cells[dim + 1]) if row_has_shared else 0
        except ValueError as exc:
            raise DatasetFormatError(lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in values):
            raise DatasetFormatError(lineno, "non-finite feature value")
        if not 0 <= label < classes:
            raise DatasetFormatError(lineno, f"label {label} outside [0, {classes})")
        features.append(values)
        labels.append(label)
        shared.append(factor)

    if not features:
        raise DatasetFormatError(len(lines), "no sample rows")
    return Dataset(
        np.array(features, dtype=np.float64),
        np.array(labels, dtype=np.int64),
        classes,
        np.array(shared, dtype=np.int64) if has_shared else None,
    )
