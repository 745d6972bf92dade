"""Subcommands of the ``labeldenoise`` entry point, one pipeline stage each."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Sequence

import numpy as np
import torch
import yaml

from ..core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..core.config_io import config_hash, load_config, load_domain_spec, save_config
from ..core.dataset_io import SceneDataset, read_dataset
from ..core.errors import (
    ConfigError,
    DatasetError,
    InputError,
    LabelDenoiseError,
    RunDirectoryExistsError,
)
from ..core.evaluation import EvalReport, evaluate_model
from ..core.models import ABLATIONS, HCLS_MODES, METHODS, AdaptationConfig
from ..core.network import ArchitectureSpec, build_model
from ..core.reporting import emit_comparison, emit_report
from ..core.synthshift import benchmark_splits, write_dataset
from ..core.trainer import EpochMonitor, EpochState, run_adaptation, source_pretrain
from ..core.utils import ensure_directory, parse_class_list, sha256_files, slugify

logger = logging.getLogger(__name__)

RUN_MANIFEST_NAME = "run_manifest.yaml"
_MANIFEST_HEADER = "# labeldenoise run manifest\n"
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
SWEEP_PARAMS = ("alpha", "lambda_ent", "lambda_neg", "epsilon")
# (run name, method, ablation) in the order they appear in the comparison table.
REPRODUCE_RUNS = (
    ("ld", "ld", "none"),
    ("ld_no_pos", "ld", "no-pos"),
    ("ld_no_neg", "ld", "no-neg"),
    ("entmin", "entmin", "none"),
    ("pseudo", "pseudo", "none"),
    ("pseudo_ent", "pseudo_ent", "none"),
    ("pseudo_sel", "pseudo_sel", "none"),
    ("shot_im", "shot_im", "none"),
)


class UsageError(LabelDenoiseError):
    """The command line could not be parsed."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


@dataclass(slots=True)
class RunManifest:
    subcommand: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    code_hash: str = ""
    started_at: str = ""
    finished_at: str = ""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def code_version_hash() -> str:
    """Content hash over the package sources, standing in for a commit id."""
    package_root = Path(__file__).resolve().parents[1]
    return sha256_files(package_root.rglob("*.py"), root=package_root)


def claim_run_dir(out_dir: Path, force: bool) -> None:
    if (out_dir / RUN_MANIFEST_NAME).exists() and not force:
        raise RunDirectoryExistsError(f"'{out_dir}' already holds a run; pass --force to overwrite it")
    ensure_directory(out_dir)


def write_run_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    manifest.code_hash = manifest.code_hash or code_version_hash()
    manifest.finished_at = _now()
    path = out_dir / RUN_MANIFEST_NAME
    path.write_text(f"{_MANIFEST_HEADER}{yaml.safe_dump(asdict(manifest), sort_keys=False)}")
    return path


def load_run_manifest(path: Path) -> RunManifest:
    data = yaml.safe_load(path.read_text()) or {}
    return RunManifest(**data)


def _resolve_config(args: argparse.Namespace, **overrides: Any) -> AdaptationConfig:
    config = load_config(args.config, {"seed": args.seed, "workers": args.workers, **overrides})
    torch.set_num_threads(config.workers)
    return config


def _run_name(config: AdaptationConfig) -> str:
    if config.method != "ld":
        return config.method
    if config.disable_pos:
        return "ld_no_pos"
    if config.disable_neg:
        return "ld_no_neg"
    return "ld"


def _check_classes(dataset: SceneDataset, num_classes: int, what: str) -> None:
    if dataset.num_classes != num_classes:
        raise ConfigError(f"{what} has C={dataset.num_classes} classes but the run expects C={num_classes}")


def _evaluate(model: torch.nn.Module, dataset: SceneDataset, config: AdaptationConfig, excluded: Sequence[int] = ()) -> EvalReport:
    report, _ = evaluate_model(
        model,
        dataset.images,
        dataset.require_labels("evaluation"),
        config.num_classes,
        excluded=excluded,
        batch_size=config.eval_batch_size,
    )
    return report


def _trajectory_monitor(dataset: SceneDataset, config: AdaptationConfig, history: List[EvalReport]) -> EpochMonitor:
    """Evaluate on a labelled split after every epoch; labels never reach the objective."""

    def monitor(state: EpochState, model: torch.nn.Module) -> None:
        report = _evaluate(model, dataset, config)
        history.append(report)
        logger.info("epoch %d: target mIoU %.2f", state.epoch, 100.0 * report.miou)

    return monitor


def _adapt_and_report(
    source: Checkpoint,
    target: SceneDataset,
    config: AdaptationConfig,
    run_dir: Path,
    *,
    eval_set: SceneDataset | None,
    reference: EvalReport | None,
) -> tuple[Checkpoint, EvalReport | None]:
    history: List[EvalReport] = []
    monitor = _trajectory_monitor(eval_set, config, history) if eval_set is not None else None
    adapted = run_adaptation(source, target.images_only(), config, run_dir=run_dir, monitor=monitor)
    save_checkpoint(adapted, run_dir / "adapted.ckpt")
    if eval_set is None:
        return adapted, None
    if not history:
        history.append(_evaluate(adapted.model, eval_set, config))
    emit_report(
        history,
        run_dir / "report",
        method=_run_name(config),
        config_hash=config_hash(config),
        reference=reference,
    )
    return adapted, history[-1]


def cmd_dataset_gen(args: argparse.Namespace) -> int:
    started = _now()
    spec = load_domain_spec(args.spec)
    claim_run_dir(args.out, args.force)
    dataset = write_dataset(
        spec,
        args.count,
        args.out,
        start_index=args.start_index,
        workers=args.workers or 1,
        with_labels=not args.images_only,
    )
    write_run_manifest(
        args.out,
        RunManifest(
            subcommand="dataset gen",
            config={"spec": asdict(spec), "count": len(dataset), "images_only": args.images_only},
            inputs={"spec": str(args.spec)},
            outputs={"dataset": str(args.out)},
            started_at=started,
        ),
    )
    return EXIT_OK


def cmd_train_source(args: argparse.Namespace) -> int:
    started = _now()
    config = _resolve_config(args, source_epochs=args.epochs)
    source = read_dataset(args.data)
    _check_classes(source, config.num_classes, f"source data '{args.data}'")
    eval_set = read_dataset(args.source_eval) if args.source_eval is not None else None
    claim_run_dir(args.out, args.force)
    save_config(args.out / "config.yaml", config)

    architecture = ArchitectureSpec(num_classes=config.num_classes)
    model = build_model(architecture, seed=config.seed)
    checkpoint = source_pretrain(model, source, config, eval_dataset=eval_set, run_dir=args.out, architecture=architecture)
    save_checkpoint(checkpoint, args.out / "source.ckpt")
    inputs = {"data": str(args.data)}
    if args.source_eval is not None:
        inputs["source_eval"] = str(args.source_eval)
    write_run_manifest(
        args.out,
        RunManifest(
            subcommand="train-source",
            config=asdict(config),
            inputs=inputs,
            outputs={"checkpoint": str(args.out / "source.ckpt")},
            started_at=started,
        ),
    )
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    started = _now()
    config = _resolve_config(args, method=args.method, adapt_epochs=args.epochs, hcls_mode=args.hcls_mode)
    if args.ablation is not None:
        config.with_ablation(args.ablation).validate()
    source = load_checkpoint(args.checkpoint, expected_num_classes=config.num_classes)
    if source.stage != "source-pretrained":
        raise ConfigError(f"'{args.checkpoint}' is a {source.stage} checkpoint; adapt needs a source-pretrained one")
    target = read_dataset(args.target)
    _check_classes(target, config.num_classes, f"target data '{args.target}'")
    eval_set = read_dataset(args.eval) if args.eval is not None else None
    claim_run_dir(args.out, args.force)
    save_config(args.out / "config.yaml", config)

    reference = _evaluate(source.model, eval_set, config) if eval_set is not None else None
    _, final = _adapt_and_report(source, target, config, args.out, eval_set=eval_set, reference=reference)
    if final is not None and reference is not None:
        logger.info("%s: mIoU %.2f (source-only %.2f)", _run_name(config), 100.0 * final.miou, 100.0 * reference.miou)

    inputs = {"checkpoint": str(args.checkpoint), "target": str(args.target)}
    if args.eval is not None:
        inputs["eval"] = str(args.eval)
    write_run_manifest(
        args.out,
        RunManifest(
            subcommand="adapt",
            config=asdict(config),
            inputs=inputs,
            outputs={"checkpoint": str(args.out / "adapted.ckpt"), "metrics": str(args.out / "metrics.csv")},
            started_at=started,
        ),
    )
    return EXIT_OK


def _excluded_classes(value: str | None, num_classes: int) -> List[int]:
    try:
        excluded = parse_class_list(value)
    except ValueError as exc:
        raise InputError(f"--exclude-classes expects comma separated integers, got '{value}'") from exc
    outside = [cls for cls in excluded if not 0 <= cls < num_classes]
    if outside:
        raise InputError(f"excluded classes {outside} lie outside [0, {num_classes})")
    return excluded


def cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    config = _resolve_config(args)
    checkpoint = load_checkpoint(args.checkpoint)
    config = replace(config, num_classes=checkpoint.num_classes)
    dataset = read_dataset(args.data)
    _check_classes(dataset, checkpoint.num_classes, f"evaluation data '{args.data}'")
    labels = dataset.require_labels(f"evaluating on '{args.data}'")
    excluded = _excluded_classes(args.exclude_classes, checkpoint.num_classes)
    reference_checkpoint = (
        load_checkpoint(args.reference, expected_num_classes=checkpoint.num_classes) if args.reference else None
    )
    claim_run_dir(args.out, args.force)

    report, predictions = evaluate_model(
        checkpoint.model,
        dataset.images,
        labels,
        checkpoint.num_classes,
        excluded=excluded,
        batch_size=config.eval_batch_size,
    )
    reference = _evaluate(reference_checkpoint.model, dataset, config, excluded) if reference_checkpoint else None
    emit_report(
        [report],
        args.out,
        method=args.name or checkpoint.stage,
        config_hash=checkpoint.config_hash,
        reference=reference,
    )
    np.save(args.out / "predictions.npy", predictions)
    logger.info("mIoU %.2f over %d scenes", 100.0 * report.miou, len(dataset))

    inputs = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    if args.reference:
        inputs["reference"] = str(args.reference)
    write_run_manifest(
        args.out,
        RunManifest(
            subcommand="eval",
            config={"checkpoint_config_hash": checkpoint.config_hash, "excluded_classes": excluded},
            inputs=inputs,
            outputs={"report": str(args.out), "predictions": str(args.out / "predictions.npy")},
            started_at=started,
        ),
    )
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Generate the benchmark, pre-train, adapt with every method and write the comparison table."""
    started = _now()
    config = _resolve_config(args, source_epochs=args.source_epochs, adapt_epochs=args.adapt_epochs)
    claim_run_dir(args.out, args.force)
    save_config(args.out / "config.yaml", config)

    splits = benchmark_splits(
        config.seed,
        config.num_classes,
        source_count=args.source_count,
        target_count=args.target_count,
        eval_count=args.eval_count,
        source_eval_count=args.eval_count,
    )
    datasets: Dict[str, SceneDataset] = {}
    for name, split in splits.items():
        datasets[name] = write_dataset(
            split.spec,
            split.count,
            args.out / "data" / name,
            start_index=split.start_index,
            workers=config.workers,
            with_labels=name != "target_train",
        )

    architecture = ArchitectureSpec(num_classes=config.num_classes)
    source_dir = args.out / "source"
    source = source_pretrain(
        build_model(architecture, seed=config.seed),
        datasets["source"],
        config,
        eval_dataset=datasets["source_eval"],
        run_dir=source_dir,
        architecture=architecture,
    )
    save_checkpoint(source, source_dir / "source.ckpt")

    target_eval = datasets["target_eval"]
    reference = _evaluate(source.model, target_eval, config)
    logger.info("source-only target mIoU %.2f", 100.0 * reference.miou)
    finals: Dict[str, EvalReport] = {"source_only": reference}
    for run_name, method, ablation in REPRODUCE_RUNS:
        run_config = replace(config, method=method).with_ablation(ablation).validate()
        _, final = _adapt_and_report(
            source,
            datasets["target_train"],
            run_config,
            args.out / "runs" / run_name,
            eval_set=target_eval,
            reference=reference,
        )
        finals[run_name] = final
        logger.info("%s: mIoU %.2f (%+.2f)", run_name, 100.0 * final.miou, 100.0 * (final.miou - reference.miou))

    emit_comparison(finals, args.out, config_hash=config_hash(config))
    write_run_manifest(
        args.out,
        RunManifest(
            subcommand="reproduce",
            config=asdict(config),
            outputs={"comparison": str(args.out / "comparison.txt"), "summary": str(args.out / "summary.json")},
            started_at=started,
        ),
    )
    return EXIT_OK


def _sweep_values(param: str, raw: str) -> List[float | int]:
    try:
        values = [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise InputError(f"--values expects comma separated numbers, got '{raw}'") from exc
    if not values:
        raise InputError("--values must name at least one value")
    if param != "epsilon":
        return values
    if any(not value.is_integer() for value in values):
        raise ConfigError("epsilon values must be integers")
    return [int(value) for value in values]


def cmd_sweep(args: argparse.Namespace) -> int:
    started = _now()
    config = _resolve_config(args, adapt_epochs=args.epochs, hcls_mode=args.hcls_mode)
    values = _sweep_values(args.param, args.values)
    runs = [replace(config, **{args.param: value}).validate() for value in values]
    source = load_checkpoint(args.checkpoint, expected_num_classes=config.num_classes)
    target = read_dataset(args.target)
    _check_classes(target, config.num_classes, f"target data '{args.target}'")
    eval_set = read_dataset(args.eval)
    eval_set.require_labels("sweep evaluation")
    claim_run_dir(args.out, args.force)
    save_config(args.out / "config.yaml", config)

    rows: List[tuple[float | int, float]] = []
    for value, run_config in zip(values, runs):
        adapted = run_adaptation(
            source, target.images_only(), run_config, run_dir=args.out / slugify(f"{args.param}-{value}")
        )
        miou = _evaluate(adapted.model, eval_set, run_config).miou
        rows.append((value, miou))
        logger.info("%s=%s: mIoU %.2f", args.param, value, 100.0 * miou)

    with (args.out / "sweep.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["param", "value", "miou"])
        for value, miou in rows:
            writer.writerow([args.param, value, f"{miou:.6f}"])
    write_run_manifest(
        args.out,
        RunManifest(
            subcommand="sweep",
            config={**asdict(config), "sweep_param": args.param, "sweep_values": list(values)},
            inputs={"checkpoint": str(args.checkpoint), "target": str(args.target), "eval": str(args.eval)},
            outputs={"sweep": str(args.out / "sweep.csv")},
            started_at=started,
        ),
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file with AdaptationConfig fields")
    common.add_argument("--seed", type=int, help="overrides LD_SFSS_SEED and the config file")
    common.add_argument("--workers", type=int, help="threads for generation and torch intra-op work")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _ArgumentParser(prog="labeldenoise", description="Label denoising for source-free segmentation")
    commands = parser.add_subparsers(dest="command", required=True)

    dataset = commands.add_parser("dataset", help="synthetic dataset tools")
    dataset_commands = dataset.add_subparsers(dest="dataset_command", required=True)
    gen = dataset_commands.add_parser("gen", parents=[common], help="generate a dataset from a domain spec")
    gen.add_argument("--spec", type=Path, required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--start-index", type=int, default=0)
    gen.add_argument("--images-only", action="store_true", help="store images without labels")
    gen.set_defaults(handler=cmd_dataset_gen)

    train = commands.add_parser("train-source", parents=[common], help="supervised source pre-training")
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--source-eval", type=Path)
    train.add_argument("--epochs", type=int)
    train.set_defaults(handler=cmd_train_source)

    adapt = commands.add_parser("adapt", parents=[common], help="source-free adaptation")
    adapt.add_argument("--checkpoint", type=Path, required=True)
    adapt.add_argument("--target", type=Path, required=True)
    adapt.add_argument("--out", type=Path, required=True)
    adapt.add_argument("--eval", type=Path, help="labelled split for the per-epoch report")
    adapt.add_argument("--method", choices=METHODS)
    adapt.add_argument("--ablation", choices=ABLATIONS)
    adapt.add_argument("--hcls-mode", choices=HCLS_MODES)
    adapt.add_argument("--epochs", type=int)
    adapt.set_defaults(handler=cmd_adapt)

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--exclude-classes", help="comma separated class ids left out of the mIoU")
    evaluate.add_argument("--reference", type=Path, help="checkpoint the gain column is measured against")
    evaluate.add_argument("--name", help="method name shown in the report")
    evaluate.set_defaults(handler=cmd_eval)

    reproduce = commands.add_parser("reproduce", parents=[common], help="run the whole benchmark")
    reproduce.add_argument("--out", type=Path, required=True)
    reproduce.add_argument("--source-count", type=int, default=400)
    reproduce.add_argument("--target-count", type=int, default=400)
    reproduce.add_argument("--eval-count", type=int, default=100)
    reproduce.add_argument("--source-epochs", type=int)
    reproduce.add_argument("--adapt-epochs", type=int)
    reproduce.set_defaults(handler=cmd_reproduce)

    sweep = commands.add_parser("sweep", parents=[common], help="adapt once per hyper-parameter value")
    sweep.add_argument("--checkpoint", type=Path, required=True)
    sweep.add_argument("--target", type=Path, required=True)
    sweep.add_argument("--eval", type=Path, required=True)
    sweep.add_argument("--out", type=Path, required=True)
    sweep.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    sweep.add_argument("--values", required=True, help="comma separated values, e.g. 0,0.5,1")
    sweep.add_argument("--hcls-mode", choices=HCLS_MODES)
    sweep.add_argument("--epochs", type=int)
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def _configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("labeldenoise").setLevel(level)


def run(argv: Sequence[str]) -> int:
    """Parse ``argv`` and run one subcommand; returns 0, 1 (usage/config/input) or 2 (runtime)."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as exc:
        sys.stderr.write(f"{parser.format_usage()}error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)

    _configure_logging(args.verbose)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (UsageError, ConfigError, InputError, DatasetError, RunDirectoryExistsError) as exc:
        logger.error("%s", exc, exc_info=args.verbose)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.error("%s: %s", type(exc).__name__, exc, exc_info=args.verbose)
        return EXIT_FAILURE
