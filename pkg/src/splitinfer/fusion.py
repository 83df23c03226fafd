"""Multi-classifier fusion: weighted class-wise sums of posteriors.

The server-side ensemble is a set of classifier oracles, each either a
precomputed posterior table (one CSV row per sample) or an in-framework
boosted-tree model. Oracles and ensembles are immutable after load, so
concurrent prediction is safe.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .core import PosteriorVector, Sample, SplitInferError, argmax_class
from .gbdt import ArityMismatch, GbdtModel, load_model, predict_proba


class MissingPrediction(SplitInferError):
    """A posterior table has no row for a queried sample id."""


class RowNotNormalized(SplitInferError):
    """A posterior table row sums too far from 1."""


class DuplicateKey(SplitInferError):
    """A posterior table repeats an (id, model) key."""


@dataclass(frozen=True)
class DecisionMatrix:
    """k posterior rows for one sample, one row per classifier."""

    rows: tuple[PosteriorVector, ...]
    classifier_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.rows) < 1:
            raise ValueError("decision matrix needs at least one classifier row")
        if len(self.classifier_ids) != len(self.rows):
            raise ValueError("classifier id count does not match row count")
        m = len(self.rows[0])
        if any(len(r) != m for r in self.rows):
            raise ValueError("all rows must have the same class count")

    @property
    def k(self) -> int:
        return len(self.rows)

    @property
    def class_count(self) -> int:
        return len(self.rows[0])


@dataclass(frozen=True)
class FusionWeights:
    """Per-classifier weights: non-negative, not all zero."""

    w: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.w:
            raise ValueError("weights must be non-empty")
        if any(v < 0 for v in self.w):
            raise ValueError("weights must be non-negative")
        if all(v == 0 for v in self.w):
            raise ValueError("weights must not be all zero")

    @staticmethod
    def uniform(k: int) -> "FusionWeights":
        return FusionWeights(tuple(1.0 / k for _ in range(k)))


def fuse(dm: DecisionMatrix, weights: FusionWeights) -> list[float]:
    """Class-wise weighted sum of the classifier rows.

    Accumulation is sequential over classifiers so the result is exactly
    reproducible by a plain double loop. With uniform 1/k weights the
    output is itself a valid posterior vector.
    """
    if len(weights.w) != dm.k:
        raise ArityMismatch(f"{len(weights.w)} weights for {dm.k} classifiers")
    scores = [0.0] * dm.class_count
    for i in range(dm.k):
        row = dm.rows[i]
        wi = weights.w[i]
        for c in range(dm.class_count):
            scores[c] += wi * row[c]
    return scores


def decide(scores: Sequence[float]) -> int:
    """Fused class decision: largest score, ties toward the lowest index."""
    return argmax_class(scores)


class TableOracle:
    """Classifier oracle backed by precomputed posteriors keyed by sample id."""

    def __init__(self, name: str, table: dict[str, PosteriorVector]):
        if not table:
            raise ValueError("posterior table is empty")
        counts = {len(p) for p in table.values()}
        if len(counts) != 1:
            raise ValueError("posterior table mixes class counts")
        self.name = name
        self.class_count = counts.pop()
        self._table = dict(table)

    def posterior_for(self, sample: Sample) -> PosteriorVector:
        try:
            return self._table[sample.id]
        except KeyError:
            raise MissingPrediction(f"oracle {self.name!r} has no row for id {sample.id!r}") from None

    def ids(self) -> set[str]:
        return set(self._table)


class ModelOracle:
    """Classifier oracle backed by an in-framework boosted-tree model."""

    def __init__(self, name: str, model: GbdtModel):
        self.name = name
        self.model = model
        self.class_count = model.class_count

    def posterior_for(self, sample: Sample) -> PosteriorVector:
        return predict_proba(self.model, sample)


ClassifierOracle = Union[TableOracle, ModelOracle]


@dataclass(frozen=True)
class Ensemble:
    """k classifier oracles with fusion weights (uniform 1/k by default)."""

    oracles: tuple[ClassifierOracle, ...]
    weights: FusionWeights = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if len(self.oracles) < 1:
            raise ValueError("ensemble needs at least one oracle")
        counts = {o.class_count for o in self.oracles}
        if len(counts) != 1:
            raise ValueError("oracles disagree on class count")
        if self.weights is None:
            object.__setattr__(self, "weights", FusionWeights.uniform(len(self.oracles)))
        if len(self.weights.w) != len(self.oracles):
            raise ValueError("weight count does not match oracle count")

    @property
    def k(self) -> int:
        return len(self.oracles)

    @property
    def class_count(self) -> int:
        return self.oracles[0].class_count


def ensemble_predict(e: Ensemble, sample: Sample) -> tuple[PosteriorVector, int]:
    """Query every oracle in declared order, fuse, and decide."""
    rows = tuple(o.posterior_for(sample) for o in e.oracles)
    dm = DecisionMatrix(rows=rows, classifier_ids=tuple(o.name for o in e.oracles))
    scores = fuse(dm, e.weights)
    return PosteriorVector(tuple(scores)), decide(scores)


_TABLE_HEADER_PREFIX = ("id", "model")


def load_posterior_table(path: Union[str, Path], model: Optional[str] = None) -> TableOracle:
    """Load one classifier's posterior table from CSV.

    The file carries a `model` column; pass `model` to select one
    classifier from a multi-model file, otherwise the file must contain a
    single model name. Rows whose probabilities sum more than 1e-3 away
    from 1 are rejected; milder drift is renormalized.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RowNotNormalized(f"{path}: empty file")
        m = len(header) - 2
        if m < 1 or header != list(_TABLE_HEADER_PREFIX) + [f"p{i}" for i in range(m)]:
            raise SplitInferError(f"{path}: bad posterior table header {header!r}")
        table: dict[str, PosteriorVector] = {}
        names: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != m + 2:
                raise SplitInferError(f"{path}:{lineno}: expected {m + 2} fields")
            sid, name = row[0], row[1]
            if model is not None and name != model:
                continue
            names.add(name)
            if len(names) > 1:
                raise SplitInferError(
                    f"{path}: multiple model names {sorted(names)}; pass model= to select one"
                )
            if sid in table:
                raise DuplicateKey(f"{path}:{lineno}: duplicate id {sid!r} for model {name!r}")
            probs = [float(v) for v in row[2:]]
            total = math.fsum(probs)
            if abs(total - 1.0) > 1e-3:
                raise RowNotNormalized(f"{path}:{lineno}: probabilities sum to {total!r}")
            if abs(total - 1.0) > 1e-6:
                probs = [p / total for p in probs]
            table[sid] = PosteriorVector(tuple(probs))
        if not table:
            raise MissingPrediction(
                f"{path}: no rows" + (f" for model {model!r}" if model else "")
            )
    return TableOracle(model if model is not None else names.pop(), table)


def save_posterior_table(
    path: Union[str, Path],
    model_name: str,
    rows: dict[str, PosteriorVector],
    id_order: Optional[Sequence[str]] = None,
) -> None:
    """Write a posterior table CSV; floats use repr for exact round trips."""
    if not rows:
        raise ValueError("nothing to write")
    m = len(next(iter(rows.values())))
    ids = list(id_order) if id_order is not None else sorted(rows)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(_TABLE_HEADER_PREFIX) + [f"p{i}" for i in range(m)])
        for sid in ids:
            writer.writerow([sid, model_name] + [repr(p) for p in rows[sid].probs])


def load_ensemble(path: Union[str, Path]) -> Ensemble:
    """Build an ensemble from a JSON manifest.

    Schema: ``{"oracles": [{"kind": "table", "path": ..., "model": ...} |
    {"kind": "model", "path": ..., "name": ...}], "weights": [...]}``;
    relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    spec = json.loads(path.read_text(encoding="utf-8"))
    oracles: list[ClassifierOracle] = []
    for i, entry in enumerate(spec.get("oracles", [])):
        kind = entry.get("kind")
        source = path.parent / entry["path"]
        if kind == "table":
            oracles.append(load_posterior_table(source, model=entry.get("model")))
        elif kind == "model":
            name = entry.get("name", f"model{i}")
            oracles.append(ModelOracle(name, load_model(source)))
        else:
            raise SplitInferError(f"{path}: oracle {i} has unknown kind {kind!r}")
    weights = None
    if "weights" in spec:
        weights = FusionWeights(tuple(float(v) for v in spec["weights"]))
    return Ensemble(oracles=tuple(oracles), weights=weights)
