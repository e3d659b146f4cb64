"""``daef`` command line: train, predict, eval, fedsim, threshold, convert-mat.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 aborted federated session. Results go to stdout, diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from daef import anomaly, data, model as daef_model, schemas
from daef.errors import (
    ArchitectureMismatch,
    DomainError,
    EmptyInput,
    InsufficientAnomalies,
    InsufficientSamples,
    InvalidArchitecture,
    LengthMismatch,
    MissingLabelColumn,
    NoPositives,
    NonFiniteInput,
    ParseError,
    RankOutOfRange,
    SchemaError,
    SeedMismatch,
    SessionAborted,
    ShapeMismatch,
    SingularSystem,
    TooFewSamples,
    TooManyPartitions,
    VersionMismatch,
)
from daef.model import Architecture
from daef.threshold import ThresholdSpec

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_ABORTED = 0, 2, 3, 4, 5


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None
    arch: Architecture
    threshold: ThresholdSpec
    folds: int = 10
    partitions: int = 1
    workers: int = 1
    seed: int = 0
    mode: str = "layer_sync"
    nodes: int = 1

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        try:
            seed = int(doc.get("seed", 0))
            arch_doc = dict(doc["architecture"])
            arch_doc.setdefault("init_seed", seed)
            arch_doc.setdefault("lambda_hidden", 0.1)
            arch_doc.setdefault("lambda_last", 0.1)
            cfg = cls(
                dataset=doc.get("dataset"),
                arch=Architecture.from_dict(arch_doc),
                threshold=ThresholdSpec.parse(str(doc.get("threshold", "extreme_iqr"))),
                folds=int(doc.get("folds", 10)),
                partitions=int(doc.get("partitions", 1)),
                workers=int(doc.get("workers", 1)),
                seed=seed,
                mode=str(doc.get("mode", "layer_sync")),
                nodes=int(doc.get("nodes", 1)),
            )
        except InvalidArchitecture as exc:
            raise ConfigError(f"architecture: {exc}") from None
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if cfg.mode not in ("layer_sync", "post_hoc"):
            raise ConfigError(f"mode must be layer_sync or post_hoc, got {cfg.mode!r}")
        for key in ("folds", "partitions", "workers", "nodes"):
            if getattr(cfg, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        return cfg


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def bundled_config(name: str) -> dict | None:
    ref = resources.files("daef.resources") / "configs" / f"{name}.json"
    return json.loads(ref.read_text("utf-8")) if ref.is_file() else None


def load_config(args) -> RunConfig:
    """Config file (path or bundled name), then --set overrides, then flags."""
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if path.is_file():
            try:
                doc = json.loads(path.read_text("utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        else:
            doc = bundled_config(args.config)
            if doc is None:
                raise ConfigError(f"no config file or bundled config named {args.config!r}")
    doc = copy.deepcopy(doc)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        _set_path(doc, key.strip(), _parse_value(value))
    for flag in ("seed", "workers", "partitions", "nodes", "mode"):
        value = getattr(args, flag, None)
        if value is not None:
            doc[flag] = value
            if flag == "seed":
                doc.setdefault("architecture", {})["init_seed"] = value
    if "architecture" not in doc:
        raise ConfigError("no architecture given (use --config or --set architecture.layer_sizes=[...])")
    return RunConfig.from_dict(doc)


def load_labeled(cfg: RunConfig, data_path: str | None) -> data.LabeledDataset:
    manifest = None
    if cfg.dataset:
        try:
            manifest = data.load_manifest(cfg.dataset)
        except FileNotFoundError:
            manifest = None
    try:
        if manifest is not None:
            return data.load_dataset(manifest, data_path)
        if data_path is None:
            raise DataError("no --data given and the config names no known dataset")
        return data.load_csv(data_path, "label", name=Path(data_path).stem)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _check_dim(cfg: RunConfig, ds: data.LabeledDataset) -> None:
    if ds.dim != cfg.arch.n_inputs:
        raise ShapeMismatch(
            f"data has {ds.dim} features but the architecture expects m0={cfg.arch.n_inputs}"
        )


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def _print_table(rows: list[tuple], header: tuple) -> None:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args)
    ds = load_labeled(cfg, args.data)
    _check_dim(cfg, ds)
    normals = ds.normals()
    start = time.monotonic()
    fitted = anomaly.fit_detector(normals, cfg.arch, cfg.threshold, cfg.partitions, cfg.workers)
    wall = time.monotonic() - start
    out = Path(args.out or "model.json")
    daef_model.save(fitted, out)

    sizes = cfg.arch.layer_sizes
    layers = [("encoder", f"{sizes[0]}x{sizes[1]}", cfg.arch.hidden_activation)]
    for i, w in enumerate(fitted.decoder_weights, start=1):
        act = "linear" if i == len(fitted.decoder_weights) else cfg.arch.hidden_activation
        layers.append((f"decoder {i}", f"{w.shape[0]}x{w.shape[1]}", act))
    _print_table(layers, ("layer", "shape", "activation"))
    print(f"samples {normals.shape[1]}  threshold {fitted.threshold.value:.6g}  "
          f"time {wall:.3f} s  -> {out}")
    _write_json(out.with_name(out.name + ".summary.json"), {
        "dataset": ds.name,
        "n_train": int(normals.shape[1]),
        "layers": [{"name": n, "shape": s, "activation": a} for n, s, a in layers],
        "threshold": fitted.threshold.to_dict(),
        "model_sha256": fitted.fingerprint(),
        "wall_time_s": wall,
    })
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        fitted = daef_model.load(args.model)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except (SchemaError, VersionMismatch) as exc:
        raise ConfigError(f"{args.model}: {exc}") from None
    try:
        ds = data.load_csv(args.data, args.label_column)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    if ds.dim != fitted.arch.n_inputs:
        raise ShapeMismatch(f"data has {ds.dim} features, model expects {fitted.arch.n_inputs}")
    errors = anomaly.score(fitted, ds.features)
    flags = None
    if fitted.threshold is None:
        print("warning: model has no fitted threshold; writing errors only", file=sys.stderr)
    else:
        flags = anomaly.classify(errors, fitted.threshold.value)

    out = Path(args.out or "scores.csv")
    tmp = out.with_name(f".{out.name}.tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "error"] + (["anomaly"] if flags is not None else []))
        for i, e in enumerate(errors):
            w.writerow([i, repr(float(e))] + ([int(flags[i])] if flags is not None else []))
    tmp.replace(out)
    flagged = f", {int(flags.sum())} flagged" if flags is not None else ""
    print(f"scored {ds.n} samples{flagged} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    ds = load_labeled(cfg, args.data)
    _check_dim(cfg, ds)
    report = anomaly.evaluate_cv(ds, cfg.arch, cfg.threshold, cfg.folds, cfg.seed,
                                 cfg.workers, cfg.partitions)
    doc = report.to_dict()
    schemas.validate(doc, "eval_report")
    out = Path(args.out or f"{ds.name}.eval.json")
    _write_json(out, doc)
    _print_table([(ds.name, f"{100 * report.mean_f1:.1f}±{100 * report.std_f1:.1f}")],
                 ("dataset", "F1 (%)"))
    return EXIT_OK


def cmd_fedsim(args) -> int:
    from daef.federation import FedSession, simulate

    cfg = load_config(args)
    ds = load_labeled(cfg, args.data)
    _check_dim(cfg, ds)
    scaler = data.scaler_fit(ds.normals())
    x = scaler.apply(ds.normals())
    idx = data.partition_indices(x.shape[1], cfg.nodes, cfg.seed)
    blocks = [x[:, i] for i in idx]
    session = FedSession.create(f"fedsim-{cfg.seed}", cfg.arch, cfg.nodes, mode=cfg.mode,
                                workers=cfg.workers, timeout=args.timeout)
    outcome = simulate(session, blocks)
    central = daef_model.train(np.hstack(blocks), cfg.arch, workers=cfg.workers)
    delta = weight_delta(outcome.model, central)

    rows = []
    for name, block in zip(session.roster, blocks):
        err = anomaly.reconstruction_errors(outcome.node_models[name], block)
        rows.append((name, block.shape[1], f"{err.mean():.6g}"))
    err = anomaly.reconstruction_errors(outcome.model, x)
    rows.append(("global", x.shape[1], f"{err.mean():.6g}"))
    _print_table(rows, ("node", "samples", "mean recon. error"))
    note = "" if cfg.mode == "layer_sync" else "  (post_hoc merge is approximate)"
    print(f"mode {cfg.mode}  nodes {cfg.nodes}  packets {outcome.packets}  "
          f"bytes {outcome.payload_bytes}")
    print(f"max |w_fed - w_central| = {delta:.3e}{note}")
    if args.out:
        fitted = outcome.model
        fitted.scaler = scaler
        daef_model.save(fitted, args.out)
    return EXIT_OK


def weight_delta(a: daef_model.DaefModel, b: daef_model.DaefModel) -> float:
    pairs = [(a.encoder_weights, b.encoder_weights)]
    pairs += list(zip(a.decoder_weights, b.decoder_weights))
    pairs += list(zip(a.decoder_biases, b.decoder_biases))
    return float(max(np.max(np.abs(p - q)) for p, q in pairs))


def cmd_threshold(args) -> int:
    if args.model:
        fitted = daef_model.load(args.model)
        if fitted.threshold is None:
            print("model has no fitted threshold")
        else:
            print(f"{fitted.threshold.spec.label()}  {fitted.threshold.value!r}")
        return EXIT_OK
    if not args.errors:
        raise ConfigError("threshold needs --model or --errors")
    try:
        spec = ThresholdSpec.parse(args.spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    errors = read_errors(args.errors)
    value = anomaly.fit_threshold(errors, spec)
    q1, q3 = anomaly.quantile(errors, 0.25), anomaly.quantile(errors, 0.75)
    print(f"n {errors.size}  Q1 {q1!r}  Q3 {q3!r}  IQR {q3 - q1!r}")
    print(f"{spec.label()}  {value!r}")
    return EXIT_OK


def read_errors(path: str) -> np.ndarray:
    """Errors from a scores CSV (``error`` column) or one number per line."""
    try:
        text = Path(path).read_text("utf-8")
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines and "error" in lines[0].split(","):
        col = lines[0].split(",").index("error")
        lines = [ln.split(",")[col] for ln in lines[1:]]
    try:
        return np.array([float(v) for v in lines], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_convert_mat(args) -> int:
    try:
        ds = data.convert_mat(args.mat, args.csv)
    except (FileNotFoundError, KeyError) as exc:
        raise DataError(f"{args.mat}: {exc}") from None
    print(f"{ds.n} samples, {ds.dim} features, {ds.n_anomalies} anomalies -> {args.csv}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daef", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, out_help: str):
        p.add_argument("--config", help="JSON config file or bundled name (e.g. ionosphere)")
        p.add_argument("--data", help="CSV file (defaults to the dataset named by the config)")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--partitions", type=int)
        p.add_argument("--set", action="append", metavar="K=V",
                       help="override a config entry, dotted keys, JSON values")

    p = sub.add_parser("train", help="train on the normal samples and save a model")
    common(p, out_help="model file (default model.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-fold cross-validated F1")
    common(p, out_help="report JSON (default <dataset>.eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fedsim", help="simulate federated training across nodes")
    common(p, out_help="optional model file for the global model")
    p.add_argument("--nodes", type=int)
    p.add_argument("--mode", choices=["layer_sync", "post_hoc"])
    p.add_argument("--timeout", type=float, default=30.0, help="per-round timeout (s)")
    p.set_defaults(func=cmd_fedsim)

    p = sub.add_parser("predict", help="reconstruction errors and anomaly flags")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="scores CSV (default scores.csv)")
    p.add_argument("--label-column", help="column to exclude from the features")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("threshold", help="show a model's threshold or fit one to errors")
    p.add_argument("--model")
    p.add_argument("--errors", help="scores CSV or one error per line")
    p.add_argument("--spec", default="extreme_iqr",
                   help="extreme_iqr, unusual_iqr, q90, percentile:P, contamination:R")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("convert-mat", help="convert an ODDS .mat file to CSV")
    p.add_argument("mat")
    p.add_argument("csv")
    p.set_defaults(func=cmd_convert_mat)
    return parser


_DATA_ERRORS = (
    DataError, ParseError, MissingLabelColumn, InsufficientAnomalies, InsufficientSamples,
    TooFewSamples, TooManyPartitions, ShapeMismatch, LengthMismatch, NoPositives, EmptyInput,
)
_NUMERIC_ERRORS = (SingularSystem, DomainError, NonFiniteInput, RankOutOfRange, ArithmeticError)
_CONFIG_ERRORS = (ConfigError, InvalidArchitecture, ArchitectureMismatch, SeedMismatch)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SessionAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
