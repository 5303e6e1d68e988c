"""Command-line entry point wiring the modules into reproducible runs.

Every command validates its configuration up front, writes its artifacts
into the output directory together with a ``manifest.json`` (config hash,
seed, input/output checksums), and prints a deterministic summary. Exit
codes: 0 success, 1 config/validation error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys

import click
import numpy as np

from .attention import AttentionConfig, AttentionHead, Placement
from .checks import run_kernel_checks
from .detectors import (DetectorConfig, DetectorKind, detect_outliers,
                        write_verdicts_csv)
from .errors import (ConfigError, DataSchemaError, FusionError, NumericError)
from .focal import FocalLossConfig
from .metadata import (DiseaseLabel, RETAINED_LABELS, label_counts,
                       read_clean_csv, run_clean_pipeline, write_clean_csv,
                       write_provenance_json, write_rejects_csv)
from .metrics import evaluate, write_metrics_json
from .numeric import RngStream
from .trainer import (ToyModelConfig, TrainConfig, make_shape_dataset,
                      save_params, train_toy, write_trace_csv)


@dataclasses.dataclass
class RunConfig:
    """Flat run configuration; file keys and flag names map onto the fields."""

    input: str | None = None
    output_dir: str = "out"
    contamination: float = 0.108
    lof_k: int = 20
    iforest_trees: int = 100
    iforest_subsample: int = 256
    ocsvm_nu: float | None = None
    ocsvm_gamma: float | None = None
    ocsvm_max_fit: int = 4096
    mcd_h: int | None = None
    dgmp_lambda: float = 1.0
    attention_placement: str = "traditional"
    attention_heads: str = "channel,spatial,coordinate"
    attention_reduction: int = 4
    spatial_kernel: int = 7
    focal_gamma: float = 2.0
    pooling: str = "dgmp"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-4
    toy_samples: int = 800
    toy_image_size: int = 16
    toy_classes: int = 4
    check_instances: int = 50
    n_classes: int | None = None

    def detector_config(self) -> DetectorConfig:
        try:
            return DetectorConfig(
                contamination=self.contamination,
                lof_k=self.lof_k,
                iforest_trees=self.iforest_trees,
                iforest_subsample=self.iforest_subsample,
                ocsvm_nu=self.ocsvm_nu,
                ocsvm_gamma=self.ocsvm_gamma,
                ocsvm_max_fit=self.ocsvm_max_fit,
                mcd_h=self.mcd_h,
                seed=RngStream(self.seed),
            )
        except FusionError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def attention_config(self) -> AttentionConfig | None:
        raw = self.attention_heads.strip()
        if raw in ("", "none"):
            return None
        try:
            heads = tuple(AttentionHead(token.strip()) for token in raw.split(","))
            placement = Placement(self.attention_placement)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return AttentionConfig(reduction=self.attention_reduction,
                               spatial_kernel=self.spatial_kernel,
                               placement=placement, heads=heads)

    def to_manifest_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

_OPTIONAL_FLOATS = {"ocsvm_nu", "ocsvm_gamma"}
_OPTIONAL_INTS = {"mcd_h", "n_classes"}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    text = raw.strip()
    if name in _OPTIONAL_FLOATS or name in _OPTIONAL_INTS:
        if text.lower() in ("", "none", "auto"):
            return None
        caster = float if name in _OPTIONAL_FLOATS else int
    elif field.type in ("int", int):
        caster = int
    elif field.type in ("float", float):
        caster = float
    else:
        return text
    try:
        return caster(text)
    except ValueError:
        raise ConfigError(f"config key {name!r} expects {caster.__name__}, got {raw!r}")


def load_config_file(path: str) -> dict:
    """Parse a plain key=value config file; unknown keys are rejected."""
    values: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                key = key.strip().replace("-", "_")
                if key not in _FIELDS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _coerce(key, raw)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    return values


def build_config(config_path: str | None, **overrides) -> RunConfig:
    """Defaults <- config file <- CLI flags (flags win)."""
    values: dict = {}
    if config_path:
        values.update(load_config_file(config_path))
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# manifest and report helpers


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_manifest_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _write_manifest(outdir: str, cfg: RunConfig, inputs: dict[str, str],
                    outputs: list[str]) -> None:
    manifest = {
        "config": cfg.to_manifest_dict(),
        "config_hash": _config_hash(cfg),
        "seed": cfg.seed,
        "inputs": {name: _sha256_file(path) for name, path in inputs.items()},
        "outputs": {name: _sha256_file(os.path.join(outdir, name))
                    for name in sorted(outputs)},
    }
    with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_input(cfg: RunConfig) -> str:
    if not cfg.input:
        raise ConfigError("an --input file is required")
    if not os.path.exists(cfg.input):
        raise DataSchemaError(f"input file not found: {cfg.input}")
    return cfg.input


def _prepare_outdir(cfg: RunConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _vote_totals(verdicts) -> dict[str, int]:
    totals = {kind.value: 0 for kind in DetectorKind}
    fused = 0
    for v in verdicts:
        for kind in DetectorKind:
            totals[kind.value] += int(v.votes[kind])
        fused += int(v.is_outlier)
    totals["fused"] = fused
    return totals


def _counts_table(counts: dict[DiseaseLabel, int]) -> str:
    width = max(len(l.value) for l in RETAINED_LABELS)
    lines = [f"{label.value:<{width}}  {counts[label]:>8d}" for label in RETAINED_LABELS]
    lines.append(f"{'total':<{width}}  {sum(counts.values()):>8d}")
    return "\n".join(lines)


def _metrics_table(report) -> str:
    return "\n".join([
        f"accuracy          {report.accuracy:.4f}",
        f"macro f1          {report.macro_f1:.4f}",
        f"macro specificity {report.macro_specificity:.4f}",
        f"macro sensitivity {report.macro_sensitivity:.4f}",
    ])


# ---------------------------------------------------------------------------
# commands


@click.group(name="outlier-fusion")
def cli():
    """Outlier-fusion cleaning pipeline, model kernels and toy trainer."""


_config_option = click.option("--config", "config_path", type=str, default=None,
                              help="key=value config file; flags override it")


@cli.command()
@_config_option
@click.option("--input", "input_", type=str, default=None, help="metadata CSV")
@click.option("--out", "output_dir", type=str, default=None, help="output directory")
@click.option("--contamination", type=float, default=None)
@click.option("--seed", type=int, default=None)
def clean(config_path, input_, output_dir, contamination, seed):
    """Run the full metadata cleaning pipeline and write the clean dataset."""
    cfg = build_config(config_path, input=input_, output_dir=output_dir,
                       contamination=contamination, seed=seed)
    path = _require_input(cfg)
    outdir = _prepare_outdir(cfg)
    result = run_clean_pipeline(path, cfg.detector_config())
    write_clean_csv(result.dataset, os.path.join(outdir, "clean.csv"))
    write_rejects_csv(result.rejects, os.path.join(outdir, "rejects.csv"))
    write_provenance_json(result.dataset.provenance,
                          os.path.join(outdir, "provenance.json"))
    write_verdicts_csv(result.verdicts, os.path.join(outdir, "verdicts.csv"))
    _write_manifest(outdir, cfg, {"input": path},
                    ["clean.csv", "rejects.csv", "provenance.json", "verdicts.csv"])
    prov = result.dataset.provenance
    click.echo(f"raw records        {prov.raw}")
    click.echo(f"single-factor      {prov.single_factor}")
    click.echo(f"clean              {prov.clean}")
    click.echo(f"removed outliers   {prov.removed_outliers}")
    for name, total in _vote_totals(result.verdicts).items():
        click.echo(f"votes[{name}] {total}")


@cli.command()
@_config_option
@click.option("--input", "input_", type=str, default=None, help="metadata CSV")
@click.option("--out", "output_dir", type=str, default=None)
@click.option("--contamination", type=float, default=None)
@click.option("--seed", type=int, default=None)
def outliers(config_path, input_, output_dir, contamination, seed):
    """Run the five detectors plus fusion and export the verdicts CSV."""
    cfg = build_config(config_path, input=input_, output_dir=output_dir,
                       contamination=contamination, seed=seed)
    path = _require_input(cfg)
    outdir = _prepare_outdir(cfg)
    from .metadata import build_features, clean_labels, parse_metadata_csv
    records, _ = parse_metadata_csv(path)
    single, _ = clean_labels(records)
    if not single:
        raise DataSchemaError("no single-factor records to score")
    features = build_features(single)
    result = detect_outliers(features, cfg.detector_config(),
                             sample_ids=[r.image_id for r in single])
    write_verdicts_csv(result.verdicts, os.path.join(outdir, "verdicts.csv"))
    _write_manifest(outdir, cfg, {"input": path}, ["verdicts.csv"])
    for name, total in _vote_totals(result.verdicts).items():
        click.echo(f"votes[{name}] {total}")


@cli.command()
@_config_option
@click.option("--input", "input_", type=str, default=None, help="clean CSV")
@click.option("--out", "output_dir", type=str, default=None)
def counts(config_path, input_, output_dir):
    """Per-label counts of a clean CSV, table-style."""
    cfg = build_config(config_path, input=input_, output_dir=output_dir)
    path = _require_input(cfg)
    rows = read_clean_csv(path)
    tally = {label: 0 for label in RETAINED_LABELS}
    for _, label, _, _ in rows:
        if label not in tally:
            raise DataSchemaError(f"clean CSV contains transient label {label.value}")
        tally[label] += 1
    click.echo(_counts_table(tally))
    if cfg.output_dir != "out" or config_path:
        outdir = _prepare_outdir(cfg)
        with open(os.path.join(outdir, "counts.json"), "w", encoding="utf-8") as fh:
            json.dump({l.value: tally[l] for l in RETAINED_LABELS}, fh,
                      indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(outdir, cfg, {"input": path}, ["counts.json"])


@cli.command("check-kernels")
@_config_option
@click.option("--seed", type=int, default=None)
@click.option("--instances", "check_instances", type=int, default=None)
def check_kernels(config_path, seed, check_instances):
    """Gradient and invariant checks; exits non-zero when any check fails."""
    cfg = build_config(config_path, seed=seed, check_instances=check_instances)
    results = run_kernel_checks(cfg.seed, cfg.check_instances)
    for result in results:
        click.echo(result.line())
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericError(f"{len(failed)} kernel check(s) failed")
    click.echo("all checks passed")


@cli.command("train-toy")
@_config_option
@click.option("--out", "output_dir", type=str, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--pooling", type=click.Choice(["dgmp", "maxpool"]), default=None)
@click.option("--placement", "attention_placement",
              type=click.Choice(["self", "traditional"]), default=None)
@click.option("--heads", "attention_heads", type=str, default=None,
              help="comma list of channel,spatial,coordinate or 'none'")
@click.option("--gamma", "focal_gamma", type=float, default=None)
@click.option("--samples", "toy_samples", type=int, default=None)
def train_toy_cmd(config_path, output_dir, seed, epochs, batch_size, learning_rate,
                  pooling, attention_placement, attention_heads, focal_gamma,
                  toy_samples):
    """Train the toy CNN on synthetic shapes and write trace + parameters."""
    cfg = build_config(config_path, output_dir=output_dir, seed=seed, epochs=epochs,
                       batch_size=batch_size, learning_rate=learning_rate,
                       pooling=pooling, attention_placement=attention_placement,
                       attention_heads=attention_heads, focal_gamma=focal_gamma,
                       toy_samples=toy_samples)
    outdir = _prepare_outdir(cfg)
    images, labels = make_shape_dataset(cfg.toy_samples, cfg.toy_image_size,
                                        cfg.toy_classes, RngStream(cfg.seed, 1))
    model_cfg = ToyModelConfig(image_size=cfg.toy_image_size,
                               n_classes=cfg.toy_classes, pooling=cfg.pooling,
                               dgmp_lambda=cfg.dgmp_lambda,
                               attention=cfg.attention_config())
    train_cfg = TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                            batch_size=cfg.batch_size,
                            focal=FocalLossConfig(gamma=cfg.focal_gamma),
                            seed=RngStream(cfg.seed))
    outcome = train_toy(images, labels, model_cfg, train_cfg)
    write_trace_csv(outcome.trace, os.path.join(outdir, "trace.csv"))
    save_params(outcome.params, os.path.join(outdir, "params.bin"),
                os.path.join(outdir, "params.manifest"))
    write_metrics_json(outcome.test_report, os.path.join(outdir, "metrics.json"))
    _write_manifest(outdir, cfg, {},
                    ["trace.csv", "params.bin", "params.manifest", "metrics.json"])
    click.echo(_metrics_table(outcome.test_report))


@cli.command("eval")
@_config_option
@click.option("--input", "input_", type=str, default=None,
              help="predictions CSV with columns true_label,predicted_label")
@click.option("--out", "output_dir", type=str, default=None)
@click.option("--n-classes", type=int, default=None)
def eval_cmd(config_path, input_, output_dir, n_classes):
    """Metrics report from a predictions CSV."""
    cfg = build_config(config_path, input=input_, output_dir=output_dir,
                       n_classes=n_classes)
    path = _require_input(cfg)
    import csv as _csv
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = _csv.DictReader(fh)
        expected = ["true_label", "predicted_label"]
        if reader.fieldnames != expected:
            raise DataSchemaError(
                f"predictions CSV must have columns {expected}, got {reader.fieldnames}")
        try:
            pairs = [(int(row["true_label"]), int(row["predicted_label"]))
                     for row in reader]
        except ValueError as exc:
            raise DataSchemaError(f"non-integer label in predictions CSV: {exc}")
    if not pairs:
        raise DataSchemaError("predictions CSV has no rows")
    true = np.array([p[0] for p in pairs])
    pred = np.array([p[1] for p in pairs])
    k = cfg.n_classes if cfg.n_classes else int(max(true.max(), pred.max())) + 1
    report = evaluate(true, pred, k)
    outdir = _prepare_outdir(cfg)
    write_metrics_json(report, os.path.join(outdir, "metrics.json"))
    _write_manifest(outdir, cfg, {"input": path}, ["metrics.json"])
    click.echo(_metrics_table(report))


def main(argv=None) -> int:
    """Run the CLI and map package errors onto stable exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.exceptions.ClickException as exc:
        exc.show()
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except (DataSchemaError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return 3
    except FusionError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
