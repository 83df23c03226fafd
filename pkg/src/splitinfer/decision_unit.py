"""Keep-or-send routing: meta-information generation, labeling, training.

The routing classifier (decision unit) is a binary boosted-tree model over
the client model's soft probabilities. Its training objective scales the
gradients of "send" samples by epsilon, which tunes how much data flows to
the server.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .core import Dataset, PosteriorVector, Sample, SplitInferError, argmax_class
from .fusion import Ensemble, ensemble_predict
from .gbdt import GbdtModel, TrainConfig, predict_proba, train


class DegenerateLabels(SplitInferError):
    """Routing labels contain a single class where both are required."""


KEEP, SEND = 0, 1


class RoutingChoice(enum.Enum):
    KEEP_ON_CLIENT = "keep"
    SEND_TO_SERVER = "send"


@dataclass(frozen=True)
class RoutingDecision:
    choice: RoutingChoice
    du_score: float

    @property
    def send(self) -> bool:
        return self.choice is RoutingChoice.SEND_TO_SERVER


@dataclass(frozen=True)
class MetaRecord:
    """A sample's soft probabilities plus its keep/send routing label."""

    sample_id: str
    meta_features: PosteriorVector
    routing_label: Optional[int] = None

    def __post_init__(self) -> None:
        if self.routing_label is not None and self.routing_label not in (KEEP, SEND):
            raise ValueError(f"routing label must be 0 or 1, got {self.routing_label!r}")


@dataclass(frozen=True)
class DuConfig:
    """Routing-classifier knobs: epsilon, decision threshold, boosting config."""

    epsilon: float
    threshold: float = 0.5
    train: TrainConfig = TrainConfig()

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")


def label_rule(embedded_pred: int, networked_pred: int, true_label: int) -> int:
    """1 (send) iff the two sides disagree and the server side is right."""
    return SEND if embedded_pred != networked_pred and networked_pred == true_label else KEEP


def generate_meta(embedded: GbdtModel, ensemble: Ensemble, meta_ds: Dataset) -> list[MetaRecord]:
    """Run both sides over a labeled dataset and emit labeled meta records."""
    if not meta_ds.labeled:
        raise ValueError("meta dataset must be labeled")
    records = []
    for sample in meta_ds.samples:
        probs = predict_proba(embedded, sample)
        emb_class = argmax_class(probs)
        _, net_class = ensemble_predict(ensemble, sample)
        records.append(
            MetaRecord(
                sample_id=sample.id,
                meta_features=probs,
                routing_label=label_rule(emb_class, net_class, sample.label),
            )
        )
    return records


def train_du(records: Sequence[MetaRecord], cfg: DuConfig) -> GbdtModel:
    """Train the binary routing classifier on labeled meta records.

    Send-labeled samples get gradient weight epsilon; keep-labeled weight 1.
    With epsilon 0 a single label class is tolerated since send gradients
    vanish anyway.
    """
    if not records:
        raise ValueError("no meta records")
    if any(r.routing_label is None for r in records):
        raise ValueError("all meta records must be labeled")
    labels = {r.routing_label for r in records}
    if len(labels) < 2 and cfg.epsilon > 0:
        raise DegenerateLabels(f"meta records contain only label {labels.pop()}")
    m = len(records[0].meta_features)
    ds = Dataset(
        tuple(
            Sample(r.sample_id, r.meta_features.probs, r.routing_label) for r in records
        ),
        class_count=2,
        feature_count=m,
    )
    return train(ds, replace(cfg.train, epsilon=cfg.epsilon), objective="logistic")


def route(
    du: GbdtModel,
    meta: PosteriorVector,
    comm_available: bool,
    threshold: float = 0.5,
) -> RoutingDecision:
    """Keep/send decision for one sample's meta features.

    Without communication everything stays on the client regardless of the
    score; otherwise the sample is sent when the send probability reaches
    the threshold.
    """
    if du.objective != "logistic":
        raise ValueError("decision unit must be a binary logistic model")
    score = predict_proba(du, meta.probs)[1]
    if not comm_available:
        return RoutingDecision(RoutingChoice.KEEP_ON_CLIENT, score)
    if score >= threshold:
        return RoutingDecision(RoutingChoice.SEND_TO_SERVER, score)
    return RoutingDecision(RoutingChoice.KEEP_ON_CLIENT, score)


def oracle_route(embedded_pred: int, networked_pred: int, true_label: int) -> RoutingDecision:
    """Ideal routing computed from known labels; upper bound for tests."""
    label = label_rule(embedded_pred, networked_pred, true_label)
    choice = RoutingChoice.SEND_TO_SERVER if label == SEND else RoutingChoice.KEEP_ON_CLIENT
    return RoutingDecision(choice, float(label))


@dataclass(frozen=True)
class ConfusionRates:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    tnr: float
    fnr: float


def du_confusion(
    du: GbdtModel, records: Sequence[MetaRecord], threshold: float = 0.5
) -> ConfusionRates:
    """Confusion counts and rates of the routing classifier on labeled records."""
    if any(r.routing_label is None for r in records):
        raise ValueError("all meta records must be labeled")
    pos = sum(1 for r in records if r.routing_label == SEND)
    neg = len(records) - pos
    if pos == 0 or neg == 0:
        raise DegenerateLabels("confusion rates need both routing classes present")
    tp = fp = tn = fn = 0
    for r in records:
        predicted_send = predict_proba(du, r.meta_features.probs)[1] >= threshold
        if r.routing_label == SEND:
            tp += predicted_send
            fn += not predicted_send
        else:
            fp += predicted_send
            tn += not predicted_send
    return ConfusionRates(
        tp=tp, fp=fp, tn=tn, fn=fn,
        tpr=tp / pos, fpr=fp / neg, tnr=tn / neg, fnr=fn / pos,
    )


def save_meta_records(records: Sequence[MetaRecord], path: Union[str, Path]) -> None:
    """Write meta records as CSV: id, the m probabilities, routing label."""
    if not records:
        raise ValueError("nothing to write")
    m = len(records[0].meta_features)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"p{i}" for i in range(m)] + ["routing_label"])
        for r in records:
            label = "" if r.routing_label is None else str(r.routing_label)
            writer.writerow([r.sample_id] + [repr(p) for p in r.meta_features.probs] + [label])


def load_meta_records(path: Union[str, Path]) -> list[MetaRecord]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[0] != "id" or header[-1] != "routing_label":
            raise SplitInferError(f"{path}: bad meta record header {header!r}")
        m = len(header) - 2
        if header[1:-1] != [f"p{i}" for i in range(m)]:
            raise SplitInferError(f"{path}: bad meta record header {header!r}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != m + 2:
                raise SplitInferError(f"{path}:{lineno}: expected {m + 2} fields")
            probs = tuple(float(v) for v in row[1 : m + 1])
            label = None if row[-1] == "" else int(row[-1])
            records.append(MetaRecord(row[0], PosteriorVector(probs), label))
    return records
