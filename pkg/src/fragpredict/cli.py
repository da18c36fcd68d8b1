"""Command-line pipeline: synth, extract-features, train, eval, predict.

Exit codes are stable: 0 success, 1 usage error, 2 data/validation error,
3 training divergence, 4 I/O error.  Every run logs its seed and a hash of
the effective configuration to stderr so artifacts can be traced; with
identical inputs and seed, primary outputs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bb
from . import fusion
from .data import DatasetManifest, SynthConfig, load_manifest, resolve_image_path, synth_generate
from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EmptyInputError,
    EmptyRegionError,
    FragPredictError,
    ManifestError,
    SegmentationError,
    SplitError,
    StateError,
    TrainingDataError,
    TrainingDivergedError,
    UndefinedRocError,
    WeightFormatError,
)
from .evaluation import (
    classification_report,
    curves_to_json,
    micro_average_roc,
    render_report,
    render_roc,
    report_to_csv,
    roc_curve,
)
from .imaging import load_image
from .morphometry import CSV_HEADER, extract_features

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

_DATA_ERRORS = (
    ManifestError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    SegmentationError,
    EmptyRegionError,
    EmptyInputError,
    SplitError,
    TrainingDataError,
    UndefinedRocError,
    StateError,
    WeightFormatError,
)


class _UsageExit(Exception):
    def __init__(self, message: str):
        self.message = message


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures map to exit code 1."""

    def error(self, message):
        raise _UsageExit(f"{self.prog}: {message}")


def default_threads() -> int:
    env = os.environ.get("FRAGPREDICT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FRAGPREDICT_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _log_run(command: str, seed: int | None, payload: dict) -> None:
    print(
        f"[fragpredict] {command}: seed={seed} config_hash={_config_hash(payload)}",
        file=sys.stderr,
    )


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fragpredict", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fragpredict {__version__}")
    parser.add_argument(
        "--json", action="store_true", help="emit machine-readable JSON errors on stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("extract-features", help="morphometric features to CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("train", help="train one assay/modality model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--assay", required=True)
    p.add_argument("--modality", required=True)
    p.add_argument("--config", help="JSON with 'train' and/or 'backbone' sections")
    p.add_argument("--out", required=True, help="model bundle directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("eval", help="evaluate a model bundle against a manifest")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("predict", help="per-image fragmentation probabilities")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--image", required=True, nargs="+", help="one or more image paths")

    return parser


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_dict(_read_json(args.config)) if args.config else SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    _log_run("synth", cfg.seed, cfg.to_dict())
    manifest = synth_generate(cfg, args.out)
    print(f"wrote {len(manifest.records)} images and manifest to {args.out}")
    return EXIT_OK


def _extract_rows(manifest: DatasetManifest, manifest_path: str, threads: int):
    paths = [resolve_image_path(manifest_path, r.image_path) for r in manifest.records]

    def one(path):
        return extract_features(load_image(path))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(one, paths))
    else:
        feats = [one(p) for p in paths]
    return feats


def cmd_extract(args) -> int:
    threads = args.threads or default_threads()
    _log_run("extract-features", None, {"manifest": args.manifest, "threads": threads})
    manifest = load_manifest(args.manifest)
    feats = _extract_rows(manifest, args.manifest, threads)
    lines = ["sample_id," + ",".join(CSV_HEADER)]
    for record, f in zip(manifest.records, feats):
        values = ",".join(repr(v) for v in f.as_row())
        lines.append(f"{record.sample_id},{values}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(feats)} feature rows to {args.out}")
    return EXIT_OK


def _filter_records(manifest: DatasetManifest, assay: str, modality: str) -> DatasetManifest:
    records = [
        r for r in manifest.records if r.assay == assay and r.modality == modality
    ]
    if not records:
        raise ManifestError(
            f"manifest has no records for assay={assay!r} modality={modality!r}"
        )
    return DatasetManifest(records=records, schema_version=manifest.schema_version)


def cmd_train(args) -> int:
    threads = args.threads or default_threads()
    doc = _read_json(args.config) if args.config else {}
    tcfg = fusion.TrainConfig.from_dict(doc.get("train", {}))
    bcfg = bb.BackboneConfig.from_dict(doc.get("backbone", {}))
    if args.seed is not None:
        tcfg.seed = args.seed
    tcfg.validate()
    _log_run(
        "train",
        tcfg.seed,
        {"train": tcfg.to_dict(), "backbone": bcfg.to_dict(), "assay": args.assay,
         "modality": args.modality},
    )

    manifest = _filter_records(load_manifest(args.manifest), args.assay, args.modality)
    rule = fusion.LabelRule(assay=args.assay)
    model, history, resolved_rule = fusion.train(
        manifest, rule, tcfg, bcfg, manifest_path=args.manifest, threads=threads
    )

    out = Path(args.out)
    fusion.save_bundle(out, model, resolved_rule, tcfg)
    (out / "history.json").write_text(
        json.dumps(history, indent=2) + "\n", encoding="utf-8"
    )
    from .plots import save_history_figure

    save_history_figure(history, out / "history.png")
    best = min(h["val_loss"] for h in history)
    print(f"trained {len(history)} epoch(s); best validation loss {best:.4f}; bundle at {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    threads = args.threads or default_threads()
    model, rule, tcfg = fusion.load_bundle(args.model)
    _log_run(
        "eval",
        tcfg.seed,
        {"model": str(args.model), "manifest": args.manifest},
    )
    manifest = load_manifest(args.manifest)
    records = manifest.records
    labels, _ = fusion.resolve_labels(records, rule, args.manifest)
    tensors = fusion.prepare_tensors(
        records, labels, args.manifest, model.backbone_config.input_size, threads
    )
    morph_norm = model.normalizer.transform(tensors.morph_rows)
    _, probs = fusion._dataset_loss_probs(model, tensors, morph_norm, batch_size=64)
    predictions = (probs > 0.5).astype(np.int64)

    report = classification_report(labels, predictions)
    curves = [
        ("Unfragmented vs rest", roc_curve(1 - labels, 1.0 - probs)),
        ("Fragmented vs rest", roc_curve(labels, probs)),
        ("Micro-average", micro_average_roc(labels, probs)),
    ]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = render_report(report)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    (out / "roc.svg").write_text(render_roc(curves), encoding="utf-8")
    (out / "roc.json").write_text(curves_to_json(curves), encoding="utf-8")
    from .plots import save_roc_figure

    save_roc_figure(curves, out / "roc.png")
    sys.stdout.write(text)
    print(f"report written to {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, _ = fusion.load_bundle(args.model)
    _log_run("predict", None, {"model": str(args.model), "images": list(args.image)})
    failures = 0
    for image_path in args.image:
        try:
            prob = fusion.predict(model, load_image(image_path))
        except FragPredictError as exc:
            failures += 1
            print(f"error: {image_path}: {exc}", file=sys.stderr)
            continue
        print(f"{image_path}\t{prob:.6f}")
    return EXIT_DATA if failures else EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "extract-features": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def _emit_error(message: str, code: int, as_json: bool) -> None:
    if as_json:
        print(json.dumps({"error": message, "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {message}", file=sys.stderr)


def run(argv: list[str] | None = None) -> int:
    as_json = False
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        as_json = args.json
        return _COMMANDS[args.command](args)
    except _UsageExit as exc:
        _emit_error(exc.message, EXIT_USAGE, as_json)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        _emit_error(str(exc), EXIT_DIVERGED, as_json)
        return EXIT_DIVERGED
    except _DATA_ERRORS as exc:
        _emit_error(str(exc), EXIT_DATA, as_json)
        return EXIT_DATA
    except FragPredictError as exc:
        _emit_error(str(exc), EXIT_DATA, as_json)
        return EXIT_DATA
    except OSError as exc:
        _emit_error(str(exc), EXIT_IO, as_json)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
