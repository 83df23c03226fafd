"""Synthetic classification benchmark with a client/server accuracy gap.

Samples come from a Gaussian mixture whose overlap caps what the client
model can learn from the raw features (the weak view). Server-side
classifier oracles are emulated as posterior tables drawn around a
per-sample consensus vote with a configurable hit rate (the strong views),
so the gap between the two sides is directly controllable and every run is
reproducible from its seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .core import Dataset, PosteriorVector, Sample, SplitSpec, save_dataset_csv, split_dataset
from .fusion import save_posterior_table


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs; defaults give a roughly 0.75 vs 0.90 accuracy gap."""

    n: int = 4000
    feature_count: int = 12
    class_count: int = 4
    oracle_count: int = 4
    separation: float = 1.9
    noise: float = 1.0
    consensus_accuracy: float = 0.9
    oracle_deviation: float = 0.1
    peak: float = 2.5
    jitter: float = 0.7
    train_fraction: float = 0.6
    meta_fraction: float = 0.15
    test_fraction: float = 0.25
    seed: int = 20240601

    def __post_init__(self) -> None:
        if self.n < 10:
            raise ValueError("n too small")
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        if self.oracle_count < 1:
            raise ValueError("need at least 1 oracle")
        if not 0.0 < self.consensus_accuracy <= 1.0:
            raise ValueError("consensus_accuracy must be in (0, 1]")
        if not 0.0 <= self.oracle_deviation < 1.0:
            raise ValueError("oracle_deviation must be in [0, 1)")
        if self.separation <= 0 or self.noise <= 0 or self.peak <= 0 or self.jitter < 0:
            raise ValueError("separation, noise, peak must be positive; jitter non-negative")


@dataclass(frozen=True)
class SynthArtifacts:
    """Paths of everything the generator wrote."""

    full: Path
    train: Path
    meta: Path
    test: Path
    posterior_tables: tuple[Path, ...]
    ensemble_manifest: Path


def _sample_features(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    centers = rng.normal(size=(cfg.class_count, cfg.feature_count))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= cfg.separation
    labels = rng.integers(0, cfg.class_count, size=cfg.n)
    X = centers[labels] + rng.normal(scale=cfg.noise, size=(cfg.n, cfg.feature_count))
    return X, labels


def _other_class(rng: np.random.Generator, label: int, m: int) -> int:
    return int((label + 1 + rng.integers(0, m - 1)) % m)


def _oracle_posteriors(
    cfg: SynthConfig, labels: np.ndarray, rng: np.random.Generator
) -> list[dict[int, PosteriorVector]]:
    """Per-oracle posterior rows keyed by sample index.

    A per-sample consensus vote is correct with probability
    `consensus_accuracy`; each oracle follows the consensus except for
    occasional independent deviations, and emits a softmax peaked at its
    vote with Gaussian jitter.
    """
    m = cfg.class_count
    consensus = np.empty(cfg.n, dtype=np.int64)
    for j in range(cfg.n):
        if rng.random() < cfg.consensus_accuracy:
            consensus[j] = labels[j]
        else:
            consensus[j] = _other_class(rng, int(labels[j]), m)
    tables: list[dict[int, PosteriorVector]] = []
    for _ in range(cfg.oracle_count):
        rows: dict[int, PosteriorVector] = {}
        for j in range(cfg.n):
            vote = int(consensus[j])
            if rng.random() < cfg.oracle_deviation:
                vote = _other_class(rng, vote, m)
            z = rng.normal(scale=cfg.jitter, size=m)
            z[vote] += cfg.peak
            e = np.exp(z - z.max())
            p = e / e.sum()
            rows[j] = PosteriorVector(tuple(float(v) for v in p))
        tables.append(rows)
    return tables


def make_synthetic(cfg: SynthConfig, out_dir: Union[str, Path]) -> SynthArtifacts:
    """Generate the dataset splits, oracle posterior tables, and manifest.

    Deterministic for a given config; rerunning overwrites identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    X, labels = _sample_features(cfg, rng)
    ids = [f"s{j:06d}" for j in range(cfg.n)]
    samples = tuple(
        Sample(ids[j], tuple(float(v) for v in X[j]), int(labels[j])) for j in range(cfg.n)
    )
    full = Dataset(samples, class_count=cfg.class_count, feature_count=cfg.feature_count)
    spec = SplitSpec(cfg.train_fraction, cfg.meta_fraction, cfg.test_fraction, cfg.seed)
    train, meta, test = split_dataset(full, spec)

    full_path = out / "full.csv"
    train_path = out / "train.csv"
    meta_path = out / "meta.csv"
    test_path = out / "test.csv"
    save_dataset_csv(full, full_path)
    save_dataset_csv(train, train_path)
    save_dataset_csv(meta, meta_path)
    save_dataset_csv(test, test_path)

    tables = _oracle_posteriors(cfg, labels, rng)
    table_paths = []
    manifest_entries = []
    for i, rows in enumerate(tables):
        name = f"oracle{i}"
        path = out / f"posteriors_{name}.csv"
        save_posterior_table(
            path, name, {ids[j]: p for j, p in rows.items()}, id_order=ids
        )
        table_paths.append(path)
        manifest_entries.append({"kind": "table", "path": path.name, "model": name})
    manifest_path = out / "ensemble.json"
    manifest = {"oracles": manifest_entries}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return SynthArtifacts(
        full=full_path,
        train=train_path,
        meta=meta_path,
        test=test_path,
        posterior_tables=tuple(table_paths),
        ensemble_manifest=manifest_path,
    )


def synth_config_from_dict(raw: dict) -> SynthConfig:
    """Build a SynthConfig from a JSON-style dict, rejecting unknown keys."""
    allowed = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
    return SynthConfig(**raw)
