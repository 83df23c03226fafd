"""Gradient-boosted regression trees with a second-order objective.

Exact greedy split finding, logistic and softmax objectives, a per-sample
weight that scales positive-class gradients for the logistic objective,
and an optional dropout mode that rescales dropped trees each round.
Trained models are immutable and safe for concurrent prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import Dataset, PosteriorVector, Sample, SplitInferError

_H_EPS = 1e-16


class ObjectiveMismatch(SplitInferError):
    """Labels are incompatible with the requested objective."""


class ArityMismatch(SplitInferError):
    """A feature vector or posterior has the wrong length for the model."""


@dataclass(frozen=True)
class GradHess:
    """First and second derivative of the loss at one sample (one class)."""

    g: float
    h: float


@dataclass(frozen=True)
class TreeNode:
    """Binary regression tree node; `feature < 0` marks a leaf.

    Internal nodes route a sample left when ``x[feature] <= threshold``.
    """

    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def leaf_value(self, features: Sequence[float]) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if features[node.feature] <= node.threshold else node.right
        return node.weight

    def max_abs_leaf(self) -> float:
        if self.is_leaf:
            return abs(self.weight)
        return max(self.left.max_abs_leaf(), self.right.max_abs_leaf())


@dataclass(frozen=True)
class TrainConfig:
    """Boosting hyperparameters.

    `epsilon` scales gradients and hessians of positive-class samples and
    only applies to the logistic objective. `dart_drop_rate` > 0 switches
    training to the dropout mode.
    """

    rounds: int = 50
    max_depth: int = 4
    min_child_hessian: float = 1e-3
    lambda_: float = 1.0
    gamma: float = 0.0
    learning_rate: float = 0.3
    epsilon: float = 1.0
    dart_drop_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_child_hessian < 0:
            raise ValueError("min_child_hessian must be >= 0")
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 <= self.dart_drop_rate < 1.0:
            raise ValueError("dart_drop_rate must be in [0, 1)")
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")


@dataclass(frozen=True)
class GbdtModel:
    """Additive tree ensemble.

    `rounds` holds one tree per round for the logistic objective and
    `class_count` trees per round for softmax. `scales` carries the
    per-round dropout normalization factor (1.0 for plain boosting); the
    margin for class c is::

        base_score + sum_r learning_rate * scales[r] * rounds[r][c](x)
    """

    objective: str
    class_count: int
    feature_count: int
    learning_rate: float
    base_score: float
    rounds: tuple[tuple[TreeNode, ...], ...]
    scales: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.objective not in ("logistic", "softmax"):
            raise ValueError(f"unknown objective {self.objective!r}")
        arity = 1 if self.objective == "logistic" else self.class_count
        for r, trees in enumerate(self.rounds):
            if len(trees) != arity:
                raise ValueError(f"round {r} holds {len(trees)} trees, expected {arity}")
        if len(self.scales) != len(self.rounds):
            raise ValueError("scales and rounds length mismatch")
        if any(s <= 0 for s in self.scales):
            raise ValueError("all tree scales must be positive")

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; works on 1-D or 2-D input."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def grad_hess_logistic(y: int, margin: float, sample_weight: float = 1.0) -> GradHess:
    """Derivatives of the weighted binary cross-entropy at one margin."""
    p = float(sigmoid(np.array([margin]))[0])
    g = sample_weight * (p - y)
    h = sample_weight * max(p * (1.0 - p), _H_EPS)
    return GradHess(g, h)


def grad_hess_softmax(y: int, margins: Sequence[float]) -> tuple[GradHess, ...]:
    """Per-class derivatives of the multiclass cross-entropy at one margin vector."""
    if len(margins) < 2:
        raise ValueError("softmax needs at least 2 classes")
    p = softmax(np.asarray(margins, dtype=np.float64))
    return tuple(
        GradHess(float(p[c] - (1.0 if c == y else 0.0)), float(max(p[c] * (1.0 - p[c]), _H_EPS)))
        for c in range(len(margins))
    )


def _leaf_weight(g_sum: float, h_sum: float, lambda_: float) -> float:
    den = h_sum + lambda_
    if den <= 0.0:
        return 0.0
    return -g_sum / den


def _best_split(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    idx: np.ndarray,
    g_sum: float,
    h_sum: float,
    cfg: TrainConfig,
) -> Optional[tuple[int, float]]:
    """Exhaustive scan over (feature, midpoint threshold) pairs.

    Returns the pair with the largest strictly positive gain, or None.
    Ties break toward the lowest feature index, then the lowest threshold.
    """
    lam = cfg.lambda_
    parent = g_sum * g_sum / (h_sum + lam) if h_sum + lam > 0 else 0.0
    best_gain = 0.0
    best: Optional[tuple[int, float]] = None
    g_node = g[idx]
    h_node = h[idx]
    for f in range(X.shape[1]):
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        cg = np.cumsum(g_node[order])
        ch = np.cumsum(h_node[order])
        cut = np.nonzero(vs[:-1] != vs[1:])[0]
        if cut.size == 0:
            continue
        gl = cg[cut]
        hl = ch[cut]
        gr = g_sum - gl
        hr = h_sum - hl
        with np.errstate(divide="ignore", invalid="ignore"):
            gains = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - cfg.gamma
        ok = (hl >= cfg.min_child_hessian) & (hr >= cfg.min_child_hessian)
        gains = np.where(ok & np.isfinite(gains), gains, -np.inf)
        j = int(np.argmax(gains))
        if gains[j] > best_gain:
            best_gain = float(gains[j])
            pos = cut[j]
            best = (f, float((vs[pos] + vs[pos + 1]) / 2.0))
    return best


def _grow(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    idx: np.ndarray,
    depth: int,
    cfg: TrainConfig,
    preds: np.ndarray,
) -> TreeNode:
    g_sum = float(g[idx].sum())
    h_sum = float(h[idx].sum())
    split = None
    if depth < cfg.max_depth and idx.size >= 2:
        split = _best_split(X, g, h, idx, g_sum, h_sum, cfg)
    if split is None:
        w = _leaf_weight(g_sum, h_sum, cfg.lambda_)
        preds[idx] = w
        return TreeNode(weight=w)
    feature, threshold = split
    go_left = X[idx, feature] <= threshold
    left = _grow(X, g, h, idx[go_left], depth + 1, cfg, preds)
    right = _grow(X, g, h, idx[~go_left], depth + 1, cfg, preds)
    return TreeNode(feature=feature, threshold=threshold, left=left, right=right)


def build_tree(
    grads: Sequence[GradHess], features: Union[Dataset, np.ndarray], cfg: TrainConfig
) -> TreeNode:
    """Fit one regression tree to per-sample gradient/hessian statistics."""
    X = features.features_matrix() if isinstance(features, Dataset) else np.asarray(features, float)
    if len(grads) == 0:
        raise ValueError("need at least one sample")
    if len(grads) != X.shape[0]:
        raise ValueError("gradient count does not match sample count")
    g = np.array([gh.g for gh in grads], dtype=np.float64)
    h = np.array([gh.h for gh in grads], dtype=np.float64)
    preds = np.zeros(len(grads))
    return _grow(X, g, h, np.arange(len(grads)), 0, cfg, preds)


def _build_tree_with_preds(
    X: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: TrainConfig
) -> tuple[TreeNode, np.ndarray]:
    preds = np.zeros(X.shape[0])
    tree = _grow(X, g, h, np.arange(X.shape[0]), 0, cfg, preds)
    return tree, preds


def _dropout_set(rng: np.random.Generator, n_prior: int, drop_rate: float) -> list[int]:
    if n_prior == 0:
        return []
    dropped = [r for r in range(n_prior) if rng.random() < drop_rate]
    if not dropped:
        dropped = [int(rng.integers(0, n_prior))]
    return dropped


def _train_logistic(ds: Dataset, cfg: TrainConfig, dart: bool) -> GbdtModel:
    y = ds.labels_array()
    if y.max(initial=0) > 1 or y.min(initial=0) < 0:
        raise ObjectiveMismatch("logistic objective needs labels in {0, 1}")
    X = ds.features_matrix()
    w = np.where(y == 1, cfg.epsilon, 1.0)
    base = 0.0
    yf = y.astype(np.float64)

    rounds: list[tuple[TreeNode, ...]] = []
    scales: list[float] = []
    cache: list[np.ndarray] = []
    margins = np.full(len(ds), base)
    for t in range(cfg.rounds):
        if dart and t > 0:
            rng = np.random.default_rng([cfg.seed, t])
            dropped = _dropout_set(rng, t, cfg.dart_drop_rate)
            keep = np.array([s for s in range(t) if s not in set(dropped)], dtype=np.int64)
            margins = np.full(len(ds), base)
            for r in keep:
                margins = margins + cfg.learning_rate * scales[r] * cache[r]
        p = sigmoid(margins)
        g = w * (p - yf)
        h = w * np.maximum(p * (1.0 - p), _H_EPS)
        tree, pred = _build_tree_with_preds(X, g, h, cfg)
        if dart and t > 0:
            k = len(dropped)
            for r in dropped:
                scales[r] *= k / (k + 1.0)
            scale = 1.0 / (k + 1.0)
        else:
            scale = 1.0
        rounds.append((tree,))
        scales.append(scale)
        cache.append(pred)
        if dart:
            margins = base + cfg.learning_rate * sum(
                scales[r] * cache[r] for r in range(len(cache))
            )
        else:
            margins = margins + cfg.learning_rate * scale * pred
    return GbdtModel(
        objective="logistic",
        class_count=2,
        feature_count=ds.feature_count,
        learning_rate=cfg.learning_rate,
        base_score=base,
        rounds=tuple(rounds),
        scales=tuple(scales),
    )


def _train_softmax(ds: Dataset, cfg: TrainConfig, dart: bool) -> GbdtModel:
    m = ds.class_count
    if m < 2:
        raise ObjectiveMismatch("softmax objective needs at least 2 classes")
    y = ds.labels_array()
    X = ds.features_matrix()
    onehot = np.zeros((len(ds), m))
    onehot[np.arange(len(ds)), y] = 1.0
    base = 0.0

    rounds: list[tuple[TreeNode, ...]] = []
    scales: list[float] = []
    cache: list[np.ndarray] = []  # per round: (n, m) raw tree outputs
    margins = np.full((len(ds), m), base)
    for t in range(cfg.rounds):
        if dart and t > 0:
            rng = np.random.default_rng([cfg.seed, t])
            dropped = _dropout_set(rng, t, cfg.dart_drop_rate)
            keep = [s for s in range(t) if s not in set(dropped)]
            margins = np.full((len(ds), m), base)
            for r in keep:
                margins = margins + cfg.learning_rate * scales[r] * cache[r]
        P = softmax(margins)
        G = P - onehot
        H = np.maximum(P * (1.0 - P), _H_EPS)
        trees: list[TreeNode] = []
        preds = np.empty((len(ds), m))
        for c in range(m):
            tree, pred = _build_tree_with_preds(X, G[:, c], H[:, c], cfg)
            trees.append(tree)
            preds[:, c] = pred
        if dart and t > 0:
            k = len(dropped)
            for r in dropped:
                scales[r] *= k / (k + 1.0)
            scale = 1.0 / (k + 1.0)
        else:
            scale = 1.0
        rounds.append(tuple(trees))
        scales.append(scale)
        cache.append(preds)
        if dart:
            margins = base + cfg.learning_rate * sum(
                scales[r] * cache[r] for r in range(len(cache))
            )
        else:
            margins = margins + cfg.learning_rate * scale * preds
    return GbdtModel(
        objective="softmax",
        class_count=m,
        feature_count=ds.feature_count,
        learning_rate=cfg.learning_rate,
        base_score=base,
        rounds=tuple(rounds),
        scales=tuple(scales),
    )


def train(ds: Dataset, cfg: TrainConfig, objective: str = "softmax") -> GbdtModel:
    """Train an additive tree ensemble; dispatches to the dropout mode
    when ``cfg.dart_drop_rate > 0``."""
    if len(ds) == 0 or not ds.labeled:
        raise ValueError("training needs a non-empty labeled dataset")
    dart = cfg.dart_drop_rate > 0.0
    if objective == "logistic":
        return _train_logistic(ds, cfg, dart)
    if objective == "softmax":
        return _train_softmax(ds, cfg, dart)
    raise ValueError(f"unknown objective {objective!r}")


def train_dart(ds: Dataset, cfg: TrainConfig, objective: str = "softmax") -> GbdtModel:
    """Dropout-mode training; with drop rate 0 this is plain boosting."""
    return train(ds, cfg, objective)


def predict_margins(model: GbdtModel, features: Sequence[float]) -> np.ndarray:
    """Raw per-class margins for one feature vector."""
    if len(features) != model.feature_count:
        raise ArityMismatch(
            f"feature vector has {len(features)} entries, model expects {model.feature_count}"
        )
    n_out = 1 if model.objective == "logistic" else model.class_count
    z = np.full(n_out, model.base_score)
    for trees, scale in zip(model.rounds, model.scales):
        for c, tree in enumerate(trees):
            z[c] += model.learning_rate * scale * tree.leaf_value(features)
    return z


def predict_proba(model: GbdtModel, sample: Union[Sample, Sequence[float]]) -> PosteriorVector:
    """Class probabilities for one sample."""
    features = sample.features if isinstance(sample, Sample) else sample
    z = predict_margins(model, features)
    if model.objective == "logistic":
        p = float(sigmoid(z[0:1])[0])
        return PosteriorVector((1.0 - p, p))
    p = softmax(z)
    return PosteriorVector(tuple(float(v) for v in p))


def predict_proba_batch(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    """Class probabilities for an (n, d) matrix, one row per sample."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.feature_count:
        raise ArityMismatch(f"expected (n, {model.feature_count}) matrix, got {X.shape}")
    return np.array([predict_proba(model, tuple(row)).probs for row in X])


def predict_class(model: GbdtModel, sample: Union[Sample, Sequence[float]]) -> int:
    from .core import argmax_class

    return argmax_class(predict_proba(model, sample))


def truncate(model: GbdtModel, n_rounds: int) -> GbdtModel:
    """Model restricted to its first `n_rounds` rounds (scales included)."""
    if not 0 <= n_rounds <= model.n_rounds:
        raise ValueError("n_rounds out of range")
    return replace(model, rounds=model.rounds[:n_rounds], scales=model.scales[:n_rounds])


# Serialization: a line-oriented text form, stable byte-for-byte across
# runs so determinism can be checked by file comparison.

_MAGIC = "gbdt v1"


def _write_tree(lines: list[str], root: TreeNode) -> None:
    order: list[TreeNode] = []

    def number(node: TreeNode) -> int:
        nid = len(order)
        order.append(node)
        return nid

    links: dict[int, tuple[int, int]] = {}

    def walk(node: TreeNode) -> int:
        nid = number(node)
        if not node.is_leaf:
            links[nid] = (walk(node.left), walk(node.right))
        return nid

    walk(root)
    lines.append(f"nodes {len(order)}")
    for nid, node in enumerate(order):
        if node.is_leaf:
            lines.append(f"{nid},-1,,-1,-1,{repr(node.weight)}")
        else:
            left, right = links[nid]
            lines.append(f"{nid},{node.feature},{repr(node.threshold)},{left},{right},")


def model_to_text(model: GbdtModel) -> str:
    lines = [
        _MAGIC,
        f"objective {model.objective}",
        f"classes {model.class_count}",
        f"features {model.feature_count}",
        f"learning_rate {repr(model.learning_rate)}",
        f"base_score {repr(model.base_score)}",
        f"rounds {model.n_rounds}",
    ]
    for r, (trees, scale) in enumerate(zip(model.rounds, model.scales)):
        lines.append(f"round {r} scale {repr(scale)} trees {len(trees)}")
        for tree in trees:
            _write_tree(lines, tree)
    lines.append("end")
    return "\n".join(lines) + "\n"


class ModelFormatError(SplitInferError):
    """The serialized model text is malformed."""


def _parse_tree(lines: list[str], pos: int) -> tuple[TreeNode, int]:
    head = lines[pos].split()
    if len(head) != 2 or head[0] != "nodes":
        raise ModelFormatError(f"line {pos + 1}: expected 'nodes N'")
    count = int(head[1])
    raw: list[tuple[int, float, int, int, float]] = []
    for i in range(count):
        fields = lines[pos + 1 + i].split(",")
        if len(fields) != 6:
            raise ModelFormatError(f"line {pos + 2 + i}: expected 6 fields")
        nid, feature, threshold, left, right, weight = fields
        if int(nid) != i:
            raise ModelFormatError(f"line {pos + 2 + i}: node ids must be sequential")
        raw.append(
            (
                int(feature),
                float(threshold) if threshold else 0.0,
                int(left),
                int(right),
                float(weight) if weight else 0.0,
            )
        )

    def build(nid: int) -> TreeNode:
        feature, threshold, left, right, weight = raw[nid]
        if feature < 0:
            return TreeNode(weight=weight)
        return TreeNode(
            feature=feature, threshold=threshold, left=build(left), right=build(right)
        )

    return build(0), pos + 1 + count


def model_from_text(text: str) -> GbdtModel:
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ModelFormatError("bad magic line")

    def field(i: int, name: str) -> str:
        parts = lines[i].split(" ", 1)
        if len(parts) != 2 or parts[0] != name:
            raise ModelFormatError(f"line {i + 1}: expected '{name} ...'")
        return parts[1]

    objective = field(1, "objective")
    class_count = int(field(2, "classes"))
    feature_count = int(field(3, "features"))
    learning_rate = float(field(4, "learning_rate"))
    base_score = float(field(5, "base_score"))
    n_rounds = int(field(6, "rounds"))
    pos = 7
    rounds: list[tuple[TreeNode, ...]] = []
    scales: list[float] = []
    for r in range(n_rounds):
        head = lines[pos].split()
        if len(head) != 6 or head[0] != "round" or int(head[1]) != r:
            raise ModelFormatError(f"line {pos + 1}: expected 'round {r} scale S trees K'")
        scales.append(float(head[3]))
        n_trees = int(head[5])
        trees = []
        pos += 1
        for _ in range(n_trees):
            tree, pos = _parse_tree(lines, pos)
            trees.append(tree)
        rounds.append(tuple(trees))
    if pos >= len(lines) or lines[pos] != "end":
        raise ModelFormatError("missing 'end' terminator")
    return GbdtModel(
        objective=objective,
        class_count=class_count,
        feature_count=feature_count,
        learning_rate=learning_rate,
        base_score=base_score,
        rounds=tuple(rounds),
        scales=tuple(scales),
    )


def save_model(model: GbdtModel, path: Union[str, Path]) -> None:
    Path(path).write_text(model_to_text(model), encoding="utf-8")


def load_model(path: Union[str, Path]) -> GbdtModel:
    return model_from_text(Path(path).read_text(encoding="utf-8"))
