"""Command-line surface for the preparation and operation phases.

One JSON config file drives every subcommand; ``--set key=value`` overrides
individual entries and ``--out`` picks the output directory. Each run
writes a manifest recording the config hash, seeds, and input file hashes,
and is idempotent with respect to its declared outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .core import Dataset, SplitInferError, load_dataset_csv
from .decision_unit import (
    DuConfig,
    generate_meta,
    load_meta_records,
    save_meta_records,
    train_du,
)
from .fusion import Ensemble, load_ensemble, save_posterior_table
from .gbdt import GbdtModel, TrainConfig, load_model, predict_proba, save_model, train
from .pipeline import (
    BaselineResult,
    CostModel,
    RunConfig,
    epsilon_sweep,
    parse_report,
    random_baseline,
    run_split,
    serve_ensemble,
    summarize,
    write_report,
)
from .preprocess import bundle_to_sample, extract_features, read_ppm
from .synth import make_synthetic, synth_config_from_dict

SUBCOMMANDS = (
    "prepare-features",
    "train-embedded",
    "export-posteriors",
    "gen-meta",
    "train-du",
    "serve",
    "run",
    "sweep",
    "baseline",
    "report",
)


class ConfigError(SplitInferError):
    """The config file is missing, malformed, or inconsistent."""


class IoError(SplitInferError):
    """A referenced input file is missing or unreadable."""


def _load_config(spec: str) -> dict:
    if spec.startswith("builtin:"):
        name = spec[len("builtin:") :]
        try:
            text = resources.files("splitinfer.data").joinpath(f"{name}.json").read_text("utf-8")
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError(f"no builtin config named {name!r}") from None
    else:
        path = Path(spec)
        if not path.exists():
            raise IoError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _apply_overrides(cfg: dict, assignments: Sequence[str]) -> dict:
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return cfg


def _train_config(raw: dict) -> TrainConfig:
    raw = dict(raw)
    if "lambda" in raw:
        raw["lambda_"] = raw.pop("lambda")
    allowed = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _du_config(raw: dict) -> DuConfig:
    raw = dict(raw)
    train_cfg = _train_config(raw.pop("train", {}))
    epsilon = float(raw.pop("epsilon", 1.0))
    threshold = float(raw.pop("threshold", 0.5))
    if raw:
        raise ConfigError(f"unknown du config keys: {sorted(raw)}")
    try:
        return DuConfig(epsilon=epsilon, threshold=threshold, train=train_cfg)
    except ValueError as exc:
        raise ConfigError(f"bad du config: {exc}") from exc


def _run_config(raw: dict) -> RunConfig:
    raw = dict(raw)
    cost_raw = raw.pop("cost", {})
    try:
        cost = CostModel(**cost_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad cost model: {exc}") from exc
    allowed = {"comm_available", "threshold", "seed", "transport", "fallback_on_failure"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    try:
        return RunConfig(cost=cost, **raw)
    except ValueError as exc:
        raise ConfigError(f"bad run config: {exc}") from exc


def _require(cfg: dict, key: str) -> object:
    if key not in cfg:
        raise ConfigError(f"config key {key!r} is required for this command")
    return cfg[key]


def _input_path(raw: object, base: Path) -> Path:
    path = Path(str(raw))
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise IoError(f"input file {path} does not exist")
    return path


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    cfg: dict,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
) -> None:
    manifest = {
        "tool": f"splitinfer {__version__}",
        "command": command,
        "config_sha256": _sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")),
        "seeds": _collect_seeds(cfg),
        "inputs": {str(p): _sha256(p.read_bytes()) for p in sorted(set(inputs))},
        "outputs": [p.name for p in outputs],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _collect_seeds(cfg: object, prefix: str = "") -> dict[str, int]:
    seeds: dict[str, int] = {}
    if isinstance(cfg, dict):
        for key, value in cfg.items():
            path = f"{prefix}.{key}" if prefix else key
            if key == "seed" and isinstance(value, int):
                seeds[prefix or "seed"] = value
            else:
                seeds.update(_collect_seeds(value, path))
    return seeds


def _load_dataset(cfg: dict, key: str, base: Path) -> Dataset:
    path = _input_path(_require(cfg, key), base)
    class_count = int(_require(cfg, "class_count"))
    return load_dataset_csv(path, class_count)


def _cmd_prepare_features(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    from .core import Sample, save_dataset_csv

    if "synthetic" in cfg:
        synth_cfg = synth_config_from_dict(cfg["synthetic"])
        artifacts = make_synthetic(synth_cfg, out_dir / "data")
        return [
            artifacts.full,
            artifacts.train,
            artifacts.meta,
            artifacts.test,
            *artifacts.posterior_tables,
            artifacts.ensemble_manifest,
        ]
    manifest_path = _input_path(_require(cfg, "images_manifest"), base)
    lbp_points = int(cfg.get("lbp_points", 24))
    lbp_radius = float(cfg.get("lbp_radius", 3.0))
    lbp_mapping = str(cfg.get("lbp_mapping", "riu2"))
    roi_is_dark = bool(cfg.get("roi_is_dark", True))
    class_count = int(_require(cfg, "class_count"))
    samples: list[Sample] = []
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "path", "label"]:
            raise ConfigError(f"images manifest needs header id,path,label, got {header!r}")
        for row in reader:
            if len(row) != 3:
                raise ConfigError(f"bad images manifest row {row!r}")
            image = read_ppm(_input_path(row[1], manifest_path.parent))
            bundle = extract_features(
                image,
                roi_is_dark=roi_is_dark,
                lbp_points=lbp_points,
                lbp_radius=lbp_radius,
                lbp_mapping=lbp_mapping,
            )
            label = None if row[2] == "" else int(row[2])
            samples.append(bundle_to_sample(row[0], bundle, label))
    if not samples:
        raise ConfigError("images manifest lists no images")
    ds = Dataset(tuple(samples), class_count=class_count, feature_count=len(samples[0].features))
    out = out_dir / "features.csv"
    save_dataset_csv(ds, out)
    return [out]


def _cmd_train_embedded(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    ds = _load_dataset(cfg, "train_csv", base)
    objective = str(cfg.get("objective", "softmax"))
    model = train(ds, _train_config(cfg.get("train", {})), objective=objective)
    out = out_dir / "embedded.model"
    save_model(model, out)
    return [out]


def _cmd_export_posteriors(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    model = load_model(_input_path(_require(cfg, "model"), base))
    ds = _load_dataset(cfg, "dataset_csv", base)
    name = str(cfg.get("model_name", "model0"))
    rows = {s.id: predict_proba(model, s) for s in ds.samples}
    out = out_dir / f"posteriors_{name}.csv"
    save_posterior_table(out, name, rows, id_order=[s.id for s in ds.samples])
    return [out]


def _cmd_gen_meta(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    embedded = load_model(_input_path(_require(cfg, "embedded_model"), base))
    ensemble = load_ensemble(_input_path(_require(cfg, "ensemble"), base))
    meta_ds = _load_dataset(cfg, "meta_csv", base)
    records = generate_meta(embedded, ensemble, meta_ds)
    out = out_dir / "meta_records.csv"
    save_meta_records(records, out)
    return [out]


def _cmd_train_du(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    records = load_meta_records(_input_path(_require(cfg, "meta_records"), base))
    du = train_du(records, _du_config(cfg.get("du", {})))
    out = out_dir / "du.model"
    save_model(du, out)
    return [out]


def _cmd_serve(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    ensemble = load_ensemble(_input_path(_require(cfg, "ensemble"), base))
    host = str(cfg.get("host", "127.0.0.1"))
    port = int(cfg.get("port", 7787))
    handle = serve_ensemble(ensemble, host=host, port=port)
    print(f"serving ensemble on {handle.host}:{handle.port} (ctrl-c to stop)")
    try:
        handle._thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()
    return []


def _outcomes_csv(outcomes, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["id", "true_label", "embedded_class", "du_score", "sent", "final_class", "networked_class"]
        )
        for o in outcomes:
            writer.writerow(
                [
                    o.sample_id,
                    o.true_label,
                    o.embedded_class,
                    repr(o.du_score),
                    int(o.sent),
                    o.final_class,
                    "" if o.networked_class is None else o.networked_class,
                ]
            )


def _cmd_run(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    embedded = load_model(_input_path(_require(cfg, "embedded_model"), base))
    du = load_model(_input_path(_require(cfg, "du_model"), base))
    test = _load_dataset(cfg, "test_csv", base)
    run_cfg = _run_config(cfg.get("run", {}))
    ensemble = None
    if run_cfg.transport == "in-process" and run_cfg.comm_available:
        ensemble = load_ensemble(_input_path(_require(cfg, "ensemble"), base))
    epsilon = float(cfg.get("epsilon", float("nan")))
    outcomes, record = run_split(test, embedded, du, ensemble, run_cfg, epsilon_label=epsilon)
    outcomes_path = out_dir / "outcomes.csv"
    record_path = out_dir / "record.csv"
    _outcomes_csv(outcomes, outcomes_path)
    write_report([record], record_path)
    print(summarize([record]))
    return [outcomes_path, record_path]


def _sweep_inputs(cfg: dict, out_dir: Path, base: Path) -> tuple[Dataset, Dataset, Dataset, Path, list[Path]]:
    """Resolve sweep data either from a synthetic block or explicit paths."""
    if "synthetic" in cfg:
        synth_cfg = synth_config_from_dict(cfg["synthetic"])
        artifacts = make_synthetic(synth_cfg, out_dir / "data")
        m = synth_cfg.class_count
        train_ds = load_dataset_csv(artifacts.train, m)
        meta_ds = load_dataset_csv(artifacts.meta, m)
        test_ds = load_dataset_csv(artifacts.test, m)
        produced = [
            artifacts.full,
            artifacts.train,
            artifacts.meta,
            artifacts.test,
            *artifacts.posterior_tables,
            artifacts.ensemble_manifest,
        ]
        return train_ds, meta_ds, test_ds, artifacts.ensemble_manifest, produced
    class_count = int(_require(cfg, "class_count"))
    train_ds = load_dataset_csv(_input_path(_require(cfg, "train_csv"), base), class_count)
    meta_ds = load_dataset_csv(_input_path(_require(cfg, "meta_csv"), base), class_count)
    test_ds = load_dataset_csv(_input_path(_require(cfg, "test_csv"), base), class_count)
    ensemble_path = _input_path(_require(cfg, "ensemble"), base)
    return train_ds, meta_ds, test_ds, ensemble_path, []


def _cmd_sweep(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    train_ds, meta_ds, test_ds, ensemble_path, produced = _sweep_inputs(cfg, out_dir, base)
    objective = str(cfg.get("objective", "softmax"))
    embedded = train(train_ds, _train_config(cfg.get("train", {})), objective=objective)
    embedded_path = out_dir / "embedded.model"
    save_model(embedded, embedded_path)

    ensemble = load_ensemble(ensemble_path)
    records = generate_meta(embedded, ensemble, meta_ds)
    meta_path = out_dir / "meta_records.csv"
    save_meta_records(records, meta_path)

    sweep_cfg = cfg.get("sweep", {})
    grid = [float(v) for v in sweep_cfg.get("epsilon_grid", [0, 1, 2, 3, 5, 10, 25, 50, 100])]
    du_cfg = _du_config(cfg.get("du", {}))
    run_cfg = _run_config(cfg.get("run", {}))
    in_process_ensemble = ensemble if run_cfg.transport == "in-process" else None
    sweep_records = epsilon_sweep(
        grid, records, test_ds, embedded, in_process_ensemble, du_cfg, run_cfg
    )
    sweep_path = out_dir / "sweep.csv"
    write_report(sweep_records, sweep_path)
    print(summarize(sweep_records))
    return produced + [embedded_path, meta_path, sweep_path]


def _cmd_baseline(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    embedded = load_model(_input_path(_require(cfg, "embedded_model"), base))
    ensemble = load_ensemble(_input_path(_require(cfg, "ensemble"), base))
    test = _load_dataset(cfg, "test_csv", base)
    baseline_cfg = cfg.get("baseline", {})
    fractions = [float(v) for v in baseline_cfg.get("fractions", [0.0, 0.25, 0.5, 0.75, 1.0])]
    trials = int(baseline_cfg.get("trials", 100))
    seed = int(baseline_cfg.get("seed", 0))
    results: list[BaselineResult] = [
        random_baseline(test, embedded, ensemble, f, trials=trials, seed=seed) for f in fractions
    ]
    out = out_dir / "baseline.csv"
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fraction", "mean_accuracy", "stddev", "trials"])
        for r in results:
            writer.writerow([repr(r.fraction), repr(r.mean_accuracy), repr(r.stddev), r.trials])
    return [out]


def _cmd_report(cfg: dict, out_dir: Path, base: Path) -> list[Path]:
    path = _input_path(_require(cfg, "sweep_csv"), base)
    records = parse_report(path)
    print(summarize(records))
    return []


_HANDLERS = {
    "prepare-features": _cmd_prepare_features,
    "train-embedded": _cmd_train_embedded,
    "export-posteriors": _cmd_export_posteriors,
    "gen-meta": _cmd_gen_meta,
    "train-du": _cmd_train_du,
    "serve": _cmd_serve,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "baseline": _cmd_baseline,
    "report": _cmd_report,
}


def _collect_input_paths(cfg: dict, base: Path) -> list[Path]:
    keys = (
        "train_csv",
        "meta_csv",
        "test_csv",
        "dataset_csv",
        "embedded_model",
        "du_model",
        "model",
        "ensemble",
        "meta_records",
        "images_manifest",
        "sweep_csv",
    )
    paths = []
    for key in keys:
        if key in cfg:
            try:
                paths.append(_input_path(cfg[key], base))
            except IoError:
                continue
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitinfer",
        description="Split client/server inference: prepare models, serve, run, and sweep.",
    )
    parser.add_argument("--version", action="version", version=f"splitinfer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"{name} (configured via --config)")
        p.add_argument("--config", required=True, help="JSON config path or builtin:NAME")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry (dotted keys, JSON values)",
        )
        p.add_argument("--out", default=".", help="output directory (created if missing)")
    return parser


def dispatch(command: str, cfg: dict, out_dir: Path, config_base: Path) -> int:
    """Run one subcommand and write its manifest; returns the exit status."""
    handler = _HANDLERS[command]
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = handler(cfg, out_dir, config_base)
    if outputs:
        _write_manifest(out_dir, command, cfg, _collect_input_paths(cfg, config_base), outputs)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(_load_config(args.config), args.overrides)
        config_base = (
            Path(args.config).resolve().parent
            if not args.config.startswith("builtin:")
            else Path.cwd()
        )
        return dispatch(args.command, cfg, Path(args.out), config_base)
    except SplitInferError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
