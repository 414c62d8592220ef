"""Command-line entry point: generate, train, associate, evaluate, gradcheck.

Every subcommand loads and validates its whole configuration before writing
anything.  Exit codes: 0 success, 2 configuration error, 3 input/output or
data error, 4 runtime failure (e.g. diverged training), 5 failed gradient
check.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .association import DEFAULT_ALPHA, read_report, write_report
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import evaluate, pr_curve, score_pairs, write_metrics, write_pr_table
from .pipeline import associate_dataset, encode_dataset
from .pretext import TrainConfig, TrainingDiverged, train, write_history
from .scene import ConfigError, DatasetFormatError, SceneConfig, generate_scene, read_dataset, write_dataset

CONFIG_SCHEMA = "mvsync-config/1"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 2, 3, 4, 5
BLOCKS = {"scene", "train", "associate", "evaluate"}

log = logging.getLogger("mvsync")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def load_config(path: str | None) -> dict:
    """Parse a JSON config; unknown top-level blocks are errors."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from None
    if not isinstance(doc, dict):
        raise CliError("config must be a JSON object", EXIT_CONFIG)
    if doc.get("schema") != CONFIG_SCHEMA:
        raise CliError(f"config schema must be {CONFIG_SCHEMA!r}, got {doc.get('schema')!r}", EXIT_CONFIG)
    unknown = set(doc) - BLOCKS - {"schema", "seed"}
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_CONFIG)
    return doc


def _block(doc: dict, name: str, allowed: set[str]) -> dict:
    block = doc.get(name, {})
    if not isinstance(block, dict):
        raise CliError(f"config block {name!r} must be an object", EXIT_CONFIG)
    unknown = set(block) - allowed
    if unknown:
        raise CliError(f"unknown keys in {name!r}: {sorted(unknown)}", EXIT_CONFIG)
    return block


def _seed(args, doc: dict, required: bool) -> int | None:
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is None and required:
        raise CliError("a seed is required (--seed or config 'seed')", EXIT_CONFIG)
    if seed is not None and not (isinstance(seed, int) and 0 <= seed < 2**64):
        raise CliError("seed must be an unsigned 64-bit integer", EXIT_CONFIG)
    return seed


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}", EXIT_IO)
    return p


def _out_path(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise CliError(f"output directory does not exist: {p.parent}", EXIT_IO)
    return p


def _load_dataset(path: str):
    try:
        return read_dataset(_need_file(path, "dataset"))
    except DatasetFormatError as exc:
        raise CliError(str(exc), EXIT_IO) from None


def _load_model(path: str):
    try:
        return load_checkpoint(_need_file(path, "checkpoint"))
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from None


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    doc = load_config(args.config)
    seed = _seed(args, doc, required=True)
    fields = {f.name for f in dataclasses.fields(SceneConfig)}
    block = dict(_block(doc, "scene", fields))
    if "image_size" in block:
        block["image_size"] = tuple(block["image_size"])
    try:
        config = SceneConfig(**block)
        config.validate()
    except (TypeError, ConfigError) as exc:
        raise CliError(f"invalid scene config: {exc}", EXIT_CONFIG) from None
    out = _out_path(args.out)
    write_dataset(generate_scene(config, seed), out)
    log.info("wrote %s (seed %d)", out, seed)
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    seed = _seed(args, doc, required=True)
    block = dict(_block(doc, "train", {f.name for f in dataclasses.fields(TrainConfig)}))
    block["seed"] = seed
    try:
        config = TrainConfig.from_dict(block)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}", EXIT_CONFIG) from None
    dataset = _load_dataset(args.data)
    out = _out_path(args.out)
    if dataset.frames < config.t_max + 1:
        raise CliError(f"dataset has {dataset.frames} frames; t_max={config.t_max} needs more", EXIT_CONFIG)
    validation = None
    train_set = dataset
    if config.holdout_fraction > 0 and dataset.has_identities:
        train_set, validation = dataset.split(config.holdout_fraction)
        if train_set.frames < config.t_max + 1:
            raise CliError("too few frames left for training after the hold-out split", EXIT_CONFIG)
    header = f"seed={seed} config={json.dumps(config.to_dict(), sort_keys=True)}"
    history_path = out.with_name(out.name + ".history.txt")
    try:
        result = train(train_set, config, validation=validation)
    except TrainingDiverged as exc:
        save_checkpoint(exc.last_good, out.with_name(out.name + ".last_good.npz"), extra={"seed": seed})
        write_history(exc.history, history_path, header=header)
        raise CliError(f"training diverged: {exc}; last good checkpoint saved", EXIT_RUNTIME) from None
    save_checkpoint(result.model, out, extra={"seed": seed, "train": config.to_dict()})
    write_history(result.history, history_path, header=header)
    log.info("wrote %s and %s", out, history_path)
    return EXIT_OK


def cmd_associate(args) -> int:
    doc = load_config(args.config)
    seed = _seed(args, doc, required=False)
    block = _block(doc, "associate", {"alpha", "threshold", "use_appearance"})
    threshold = args.threshold if args.threshold is not None else block.get("threshold", 0.0)
    alpha = block.get("alpha", DEFAULT_ALPHA)
    if not 0.0 <= threshold <= 1.0:
        raise CliError("threshold must lie in [0, 1]", EXIT_CONFIG)
    if not 0.0 <= alpha <= 1.0:
        raise CliError("alpha must lie in [0, 1]", EXIT_CONFIG)
    dataset = _load_dataset(args.data)
    model, _ = _load_model(args.checkpoint)
    if model.cameras != dataset.cameras:
        raise CliError(f"checkpoint has {model.cameras} cameras, dataset {dataset.cameras}", EXIT_CONFIG)
    out = _out_path(args.out)
    records = associate_dataset(model, dataset, alpha, threshold, block.get("use_appearance", True))
    header = f"threshold={threshold!r} alpha={alpha!r} seed={seed if seed is not None else dataset.seed}"
    write_report(out, records, header=header)
    log.info("wrote %d matches to %s", len(records), out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    doc = load_config(args.config)
    seed = _seed(args, doc, required=False)
    block = _block(doc, "evaluate", {"alpha", "use_appearance"})
    alpha = block.get("alpha", DEFAULT_ALPHA)
    try:
        records = read_report(_need_file(args.report, "report"))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    dataset = _load_dataset(args.data)
    if not dataset.has_identities:
        raise CliError("evaluation needs a dataset with ground-truth identities", EXIT_CONFIG)
    model = None
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        if model.cameras != dataset.cameras:
            raise CliError(f"checkpoint has {model.cameras} cameras, dataset {dataset.cameras}", EXIT_CONFIG)
    out = _out_path(args.out)
    labels = None
    if model is not None:
        feats = encode_dataset(model, dataset, block.get("use_appearance", True))
        labels = score_pairs(dataset, feats, alpha)
    metrics = evaluate(records, dataset, labels)
    write_metrics(metrics, out, {"seed": seed if seed is not None else dataset.seed, "report": str(args.report)})
    if labels is not None:
        write_pr_table(pr_curve(labels), out.with_name(out.name + ".pr.csv"))
    log.info("acc=%s ipaa_100=%s", metrics["acc"], metrics["ipaa_100"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _seed(args, load_config(args.config), required=False)
    out = _out_path(args.out) if args.out else None
    report = gradcheck.run(seed if seed is not None else 0)
    text = json.dumps(report, indent=2) + "\n"
    if out is not None:
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK if report["passed"] else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvsync", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=_u64, help="run seed (overrides the config)")
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("generate", help="simulate a synthetic multi-view scene")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="self-supervised training on a dataset file")
    p.add_argument("data")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("associate", help="match detections across every view pair")
    p.add_argument("data")
    p.add_argument("checkpoint")
    p.add_argument("--threshold", type=float, help="confidence threshold in [0, 1]")
    common(p)
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("evaluate", help="score an association report against ground truth")
    p.add_argument("report")
    p.add_argument("data")
    p.add_argument("checkpoint", nargs="?", help="adds AP / FPR-95 and a PR table")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mvsync {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
