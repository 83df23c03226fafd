"""Domain types, dataset CSV ingestion, and deterministic stratified splitting.

Everything here is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np


class SplitInferError(Exception):
    """Base class for errors raised by this package."""


class MalformedRow(SplitInferError):
    """A CSV row has the wrong arity or a non-numeric field."""


class DuplicateId(SplitInferError):
    """Two samples share an id."""


class LabelOutOfRange(SplitInferError):
    """A label is negative or >= the declared class count."""


class EmptyClass(SplitInferError):
    """A class has fewer samples than the requested partitions require."""


@dataclass(frozen=True)
class Sample:
    """One feature vector, optionally labeled with a class index."""

    id: str
    features: tuple[float, ...]
    label: Optional[int] = None


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of samples with a fixed feature arity and class count."""

    samples: tuple[Sample, ...]
    class_count: int
    feature_count: int

    def __post_init__(self) -> None:
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.feature_count < 1:
            raise ValueError("feature_count must be positive")
        seen: set[str] = set()
        labeled = 0
        for s in self.samples:
            if len(s.features) != self.feature_count:
                raise ValueError(
                    f"sample {s.id!r} has {len(s.features)} features, expected {self.feature_count}"
                )
            if s.id in seen:
                raise DuplicateId(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.label is not None:
                if not 0 <= s.label < self.class_count:
                    raise LabelOutOfRange(
                        f"sample {s.id!r} has label {s.label}, class_count is {self.class_count}"
                    )
                labeled += 1
        if labeled not in (0, len(self.samples)):
            raise ValueError("dataset mixes labeled and unlabeled samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labeled(self) -> bool:
        return len(self.samples) > 0 and self.samples[0].label is not None

    def features_matrix(self) -> np.ndarray:
        """Sample features as an (n, d) float64 array, in dataset order."""
        return np.array([s.features for s in self.samples], dtype=np.float64).reshape(
            len(self.samples), self.feature_count
        )

    def labels_array(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError("dataset is unlabeled")
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class PosteriorVector:
    """Per-class probabilities for one sample: entries in [0, 1], summing to 1."""

    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.probs:
            raise ValueError("posterior vector must be non-empty")
        for p in self.probs:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p!r} outside [0, 1]")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {total!r}, expected 1")

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, i: int) -> float:
        return self.probs[i]


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for the train/meta/test partitions plus the shuffle seed."""

    train_fraction: float
    meta_fraction: float
    test_fraction: float
    seed: int

    def __post_init__(self) -> None:
        fractions = (self.train_fraction, self.meta_fraction, self.test_fraction)
        if any(f <= 0 for f in fractions):
            raise ValueError("all fractions must be positive")
        if abs(math.fsum(fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit an unsigned 64-bit integer")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.meta_fraction, self.test_fraction)


def argmax_class(p: Union[PosteriorVector, Sequence[float]]) -> int:
    """Index of the largest entry; ties break toward the lowest index.

    Accepts a PosteriorVector or any raw score sequence, so the decision is
    insensitive to whether scores were normalized first.
    """
    scores = p.probs if isinstance(p, PosteriorVector) else p
    if len(scores) == 0:
        raise ValueError("empty score list")
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


_DATASET_HEADER_PREFIX = ("id", "label")


def _expected_header(feature_count: int) -> list[str]:
    return list(_DATASET_HEADER_PREFIX) + [f"f{i}" for i in range(feature_count)]


def load_dataset_csv(path: Union[str, Path], class_count: int) -> Dataset:
    """Read a dataset from CSV with header ``id,label,f0,...,f{d-1}``.

    The feature arity is inferred from the header. An empty label field
    means the sample is unlabeled.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedRow(f"{path}: empty file")
        d = len(header) - 2
        if d < 1 or header != _expected_header(d):
            raise MalformedRow(f"{path}: bad header {header!r}")
        samples: list[Sample] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise MalformedRow(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            sid = row[0]
            if not sid:
                raise MalformedRow(f"{path}:{lineno}: empty id")
            if sid in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            label: Optional[int] = None
            if row[1] != "":
                try:
                    label = int(row[1])
                except ValueError:
                    raise MalformedRow(f"{path}:{lineno}: non-integer label {row[1]!r}") from None
                if not 0 <= label < class_count:
                    raise LabelOutOfRange(
                        f"{path}:{lineno}: label {label} outside [0, {class_count})"
                    )
            try:
                features = tuple(float(v) for v in row[2:])
            except ValueError:
                raise MalformedRow(f"{path}:{lineno}: non-numeric feature") from None
            if not all(math.isfinite(v) for v in features):
                raise MalformedRow(f"{path}:{lineno}: non-finite feature")
            samples.append(Sample(sid, features, label))
    return Dataset(tuple(samples), class_count=class_count, feature_count=d)


def save_dataset_csv(ds: Dataset, path: Union[str, Path]) -> None:
    """Write a dataset in the CSV format accepted by load_dataset_csv.

    Floats are written with ``repr`` so a round trip is bit-identical.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_expected_header(ds.feature_count))
        for s in ds.samples:
            label = "" if s.label is None else str(s.label)
            writer.writerow([s.id, label] + [repr(v) for v in s.features])


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of `total` by fractions; remainders break ties by index."""
    ideals = [total * f for f in fractions]
    counts = [int(math.floor(v)) for v in ideals]
    deficit = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(ideals[i] - counts[i]), i))
    for i in order[:deficit]:
        counts[i] += 1
    return counts


def _allocate_stratified(class_sizes: Sequence[int], targets: Sequence[int]) -> list[list[int]]:
    """Per-class, per-partition counts: rows sum to class sizes, columns to targets.

    Starts from proportional floors, fills column deficits by largest
    fractional remainder, then guarantees every cell is at least 1.
    """
    n = sum(class_sizes)
    n_parts = len(targets)
    counts = [[0] * n_parts for _ in class_sizes]
    row_left = list(class_sizes)
    col_left = list(targets)
    remainders: list[tuple[float, int, int]] = []
    for c, n_c in enumerate(class_sizes):
        for p, t_p in enumerate(targets):
            ideal = n_c * t_p / n
            base = int(math.floor(ideal))
            counts[c][p] = base
            row_left[c] -= base
            col_left[p] -= base
            remainders.append((ideal - base, c, p))
    remainders.sort(key=lambda item: (-item[0], item[1], item[2]))
    for _, c, p in remainders:
        if row_left[c] > 0 and col_left[p] > 0:
            counts[c][p] += 1
            row_left[c] -= 1
            col_left[p] -= 1
    # Greedy by remainder can strand a few units; place them anywhere legal.
    for c in range(len(class_sizes)):
        while row_left[c] > 0:
            p = max(range(n_parts), key=lambda j: (col_left[j], -j))
            counts[c][p] += 1
            row_left[c] -= 1
            col_left[p] -= 1
    # Every class must appear in every partition.
    for c in range(len(class_sizes)):
        for p in range(n_parts):
            if counts[c][p] == 0:
                donor = max(range(n_parts), key=lambda j: (counts[c][j], -j))
                counts[c][donor] -= 1
                counts[c][p] += 1
    return counts


def split_dataset(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Split a labeled dataset into train/meta/test partitions.

    Stratified by class so every class appears in every partition, and
    deterministic for a given seed. Partitions are disjoint, exhaustive,
    and keep samples in their original dataset order.
    """
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if not ds.labeled:
        raise ValueError("cannot split an unlabeled dataset")
    n_parts = 3
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(ds.samples):
        by_class.setdefault(int(s.label), []).append(i)  # type: ignore[arg-type]
    classes = sorted(by_class)
    for c in classes:
        if len(by_class[c]) < n_parts:
            raise EmptyClass(
                f"class {c} has {len(by_class[c])} samples; {n_parts} partitions need at least {n_parts}"
            )
    targets = _largest_remainder(len(ds), spec.fractions)
    if min(targets) < len(classes):
        raise EmptyClass(
            f"smallest partition holds {min(targets)} samples but {len(classes)} classes each need one"
        )
    counts = _allocate_stratified([len(by_class[c]) for c in classes], targets)

    rng = np.random.default_rng(spec.seed)
    part_indices: list[list[int]] = [[], [], []]
    for row, c in enumerate(classes):
        perm = [by_class[c][j] for j in rng.permutation(len(by_class[c]))]
        start = 0
        for p in range(n_parts):
            take = counts[row][p]
            part_indices[p].extend(perm[start : start + take])
            start += take
    parts = []
    for p in range(n_parts):
        chosen = sorted(part_indices[p])
        parts.append(
            Dataset(
                tuple(ds.samples[i] for i in chosen),
                class_count=ds.class_count,
                feature_count=ds.feature_count,
            )
        )
    return parts[0], parts[1], parts[2]
