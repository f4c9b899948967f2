#!/usr/bin/env python3
"""
RETAIN command line: generate, train, eval, interpret, gradcheck, search.

Exit codes: 0 success, 1 integrity / numerical / storage failure,
2 usage error. Diagnostics go to stderr; stdout only carries data when an
output path is "-".
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from models import ModelKindEnum, SplitEnum, TaskEnum
from schemas import CliConfig, Cohort, CohortConfig, RunManifest, TrainConfig, Vocabulary
from services import cohort as cohort_service
from services import storage
from services.errors import ArgumentError, CohortConfigError, RetainError
from services.interpret import explain, export_contribution_timeline, reconstruct_prediction, top_contributors
from services.metrics import evaluate
from services.registry import available_kinds, gradient_check_case, model_for
from services.search_space import get_search_space
from services.sequence_model import GRADIENT_TOLERANCE, gradient_check
from services.structured_logger import structured_logger
from services.training import infer_dims, random_search, train

VOCAB_FILENAME = "vocab.json"

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "l2": "l2_coefficient",
    "dropout_v": "dropout_v",
    "dropout_c": "dropout_c",
    "lr": "learning_rate",
    "patience": "patience",
    "clip_norm": "clip_norm",
}
# flag name -> CohortConfig field
COHORT_FLAGS = {
    "n_cases": "n_cases",
    "controls_per_case": "controls_per_case",
    "motif": "motif_kind",
    "min_visits": "min_visits",
    "max_visits": "max_visits",
    "motif_window": "motif_window",
    "gap_days": "gap_days",
    "decoy_rate": "decoy_rate",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags take precedence")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--log-level", help="overrides LOG_LEVEL")
    common.add_argument("--paper-dims", "--full-dims", dest="full_dims", action="store_true",
                        help="m=p=q=128 and baseline hidden 256 for train; gradcheck keeps its tiny dims")

    parser = argparse.ArgumentParser(prog="retain", description="Reverse-time attention models for EHR sequences")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("generate", parents=[common], help="write a synthetic cohort as JSONL")
    gen.add_argument("--out", required=True, help="cohort JSONL path, or - for stdout")
    gen.add_argument("--task", choices=[t.value for t in TaskEnum])
    gen.add_argument("--n-cases", type=int)
    gen.add_argument("--controls-per-case", type=int)
    gen.add_argument("--motif", choices=["recency", "gap"])
    gen.add_argument("--min-visits", type=int)
    gen.add_argument("--max-visits", type=int)
    gen.add_argument("--motif-window", type=int)
    gen.add_argument("--gap-days", type=int)
    gen.add_argument("--decoy-rate", type=float)

    tr = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    tr.add_argument("--data", required=True, help="cohort JSONL")
    tr.add_argument("--checkpoint", required=True, help="checkpoint JSON to write")
    tr.add_argument("--loss-csv", help="loss history CSV (default: <checkpoint>.loss.csv)")
    _model_flags(tr)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--l2", type=float, help="L2 coefficient (default per model)")
    tr.add_argument("--dropout-v", type=float)
    tr.add_argument("--dropout-c", type=float)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--clip-norm", type=float)
    tr.add_argument("--size", type=int, help="shared m=p=q=hidden size")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=[s.value for s in SplitEnum], default="test")
    ev.add_argument("--out", required=True, help="report JSON path, or - for stdout")
    ev.add_argument("--k", type=int, nargs="+", default=[5, 10], help="Recall@k cut-offs")
    ev.add_argument("--timings", action="store_true", help="include wall-clock seconds in the report")

    it = sub.add_parser("interpret", parents=[common], help="decompose one RETAIN prediction")
    it.add_argument("--data", required=True)
    it.add_argument("--checkpoint", required=True)
    it.add_argument("--patient", required=True)
    it.add_argument("--step", type=int, help="1-based prediction step (default: last visit)")
    it.add_argument("--label", type=int, default=0)
    it.add_argument("--top", type=int, default=10)
    it.add_argument("--vocab", help=f"vocabulary JSON (default: {VOCAB_FILENAME} next to the data)")
    it.add_argument("--out", required=True, help="contribution CSV path, or - for stdout")

    gc = sub.add_parser("gradcheck", parents=[common], help="compare backward with finite differences")
    gc.add_argument("--model", choices=available_kinds(), required=True)
    gc.add_argument("--task", choices=[t.value for t in TaskEnum])
    gc.add_argument("--tolerance", type=float, default=GRADIENT_TOLERANCE)
    gc.add_argument("--out", help="error table CSV path, or - for stdout (default: stderr only)")

    se = sub.add_parser("search", parents=[common], help="random hyper-parameter search")
    se.add_argument("--data", required=True)
    _model_flags(se)
    se.add_argument("--trials", type=int, default=5)
    se.add_argument("--profile", default="default", help="grid profile in configs/search_space.yml")
    se.add_argument("--out", required=True)
    return parser


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--model", choices=available_kinds())
    p.add_argument("--task", choices=[t.value for t in TaskEnum])
    p.add_argument("--vocab", help=f"vocabulary JSON (default: {VOCAB_FILENAME} next to the data)")


def _load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArgumentError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ArgumentError(f"config file {path} must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """flags > --config file > defaults"""
    file = _load_config_file(args.config)
    seed = args.seed if args.seed is not None else file.get("seed", 0)
    model_kind = getattr(args, "model", None) or file.get("model_kind", ModelKindEnum.retain.value)
    task = getattr(args, "task", None) or file.get("task")

    train_fields = dict(file.get("train", {}))
    train_fields.update({field: getattr(args, flag) for flag, field in TRAIN_FLAGS.items()
                         if getattr(args, flag, None) is not None})
    train_fields.update(seed=seed, model_kind=model_kind)
    cohort_fields = dict(file.get("cohort", {}))
    cohort_fields.update({field: getattr(args, flag) for flag, field in COHORT_FLAGS.items()
                          if getattr(args, flag, None) is not None})
    cohort_fields["seed"] = seed
    if task:
        train_fields["task"] = task
        cohort_fields["task"] = task

    options = {k: v for k, v in vars(args).items()
               if k not in TRAIN_FLAGS and k not in COHORT_FLAGS and k not in ("config", "seed", "subcommand")}
    return CliConfig(
        subcommand=args.subcommand,
        data_path=getattr(args, "data", None),
        checkpoint_path=getattr(args, "checkpoint", None),
        output_path=getattr(args, "out", None),
        model_kind=model_kind,
        task=task or TaskEnum.l2d,
        seed=seed,
        full_dims=bool(getattr(args, "full_dims", False) or file.get("full_dims", False)),
        train=TrainConfig(**train_fields),
        cohort=CohortConfig(**cohort_fields),
        options=options,
    )


def _manifest(config: CliConfig, outputs: Dict[str, str]) -> RunManifest:
    return RunManifest(subcommand=config.subcommand, seed=config.seed,
                       config=json.loads(config.json()), outputs=outputs)


def _vocab_path(config: CliConfig) -> Path:
    explicit = config.options.get("vocab")
    return Path(explicit) if explicit else Path(config.data_path).parent / VOCAB_FILENAME


def _load_vocab(config: CliConfig) -> Optional[Vocabulary]:
    path = _vocab_path(config)
    service = storage.StorageService()
    if not service.exists(path):
        return None
    return storage.read_vocabulary(path, service)


def _load_cohort(config: CliConfig) -> Cohort:
    cohort = storage.read_records(config.data_path, vocab=_load_vocab(config))
    structured_logger.log_data_summary(config.data_path, len(cohort))
    if not len(cohort):
        raise ArgumentError(f"{config.data_path} holds no records")
    return cohort


def _data_task(config: CliConfig, cohort: Cohort, explicit: Optional[str]) -> TaskEnum:
    return TaskEnum(explicit) if explicit else cohort.records[0].task


def cmd_generate(config: CliConfig) -> int:
    with structured_logger.timed_operation("generate", seed=config.seed):
        cohort = cohort_service.split(cohort_service.generate_cohort(config.cohort), config.seed)
        out = config.output_path
        outputs = {"cohort": storage.write_records(cohort, out)}
        if out != storage.STDOUT:
            outputs["vocab"] = storage.write_vocabulary(cohort.vocab, Path(out).parent / VOCAB_FILENAME)
        storage.write_manifest(_manifest(config, outputs), out)
        structured_logger.log_data_summary(out, len(cohort), n_cases=config.cohort.n_cases)
    return 0


def cmd_train(config: CliConfig) -> int:
    cohort = _load_cohort(config)
    task = _data_task(config, cohort, config.options.get("task"))
    train_config = config.train.copy(update={"task": task})
    vocab = cohort.vocab
    dims = infer_dims(cohort.records, r=vocab.size if vocab else None,
                      full_dims=config.full_dims, size=config.options.get("size"))
    with structured_logger.timed_operation("train", model_kind=train_config.model_kind.value, seed=config.seed):
        result = train(cohort, train_config, dims)
    loss_csv = config.options.get("loss_csv") or f"{config.checkpoint_path}.loss.csv"
    outputs = {
        "checkpoint": storage.save_checkpoint(result.params, config.checkpoint_path),
        "loss_csv": storage.write_loss_csv(result.history, loss_csv),
    }
    storage.write_manifest(_manifest(config, outputs), config.checkpoint_path)
    structured_logger.info(f"💾 Checkpoint written after {len(result.history)} epochs",
                           action="train", best_epoch=result.best_epoch, train_seconds=result.train_seconds)
    return 0


def cmd_eval(config: CliConfig) -> int:
    cohort = _load_cohort(config)
    params = storage.load_checkpoint(config.checkpoint_path)
    split = SplitEnum(config.options["split"])
    records = cohort.records if all(r.split is None for r in cohort.records) else cohort.subset(split)
    with structured_logger.timed_operation("evaluate", split=split.value):
        report = evaluate(records, params, ks=config.options.get("k") or (5, 10), split=split)
    outputs = {"report": storage.write_report(report, config.output_path,
                                              include_timings=bool(config.options.get("timings")))}
    storage.write_manifest(_manifest(config, outputs), config.output_path)
    if report.auc is not None:
        structured_logger.log_performance_metric("auc", report.auc, split=split.value)
    for k, value in report.recall_at_k.items():
        structured_logger.log_performance_metric(f"recall@{k}", value, split=split.value)
    return 0


def cmd_interpret(config: CliConfig) -> int:
    cohort = _load_cohort(config)
    params = storage.load_checkpoint(config.checkpoint_path)
    model_for(params)
    patient_id = config.options["patient"]
    try:
        record = cohort.get(patient_id)
    except KeyError:
        raise ArgumentError(f"patient {patient_id} not found in {config.data_path}") from None
    vocab = cohort.vocab or Vocabulary(groups={"codes": [f"CODE_{k}" for k in range(params.dims.r)]})

    with structured_logger.timed_operation("interpret", patient_id=patient_id):
        cm = explain(record, params, config.options.get("step"))
        max_error = float(np.max(np.abs(reconstruct_prediction(cm) - cm.y_hat)))
        structured_logger.log_integrity_check(patient_id, cm.prediction_step, max_error, True)
        export_contribution_timeline(cm, record, vocab, config.output_path)

    label = config.options.get("label", 0)
    for rank, c in enumerate(top_contributors(cm, label, config.options.get("top", 10)), start=1):
        print(f"{rank:>3} visit {c.visit:>3} code {c.code:>4} {vocab.name(c.code):<12} {c.value:+.6f}", file=sys.stderr)
    storage.write_manifest(_manifest(config, {"contributions": config.output_path}), config.output_path)
    return 0


def cmd_gradcheck(config: CliConfig) -> int:
    kind = ModelKindEnum(config.model_kind)
    tolerance = config.options.get("tolerance", GRADIENT_TOLERANCE)
    with structured_logger.timed_operation("gradcheck", model_kind=kind.value, seed=config.seed):
        model, params, records = gradient_check_case(kind, config.task, config.seed)
        errors = gradient_check(model, params, records)
    worst = max(errors.values())
    passed = worst <= tolerance
    rows = [[name, f"{error:.3e}"] for name, error in errors.items()]
    if config.output_path:
        outputs = {"table": storage.write_csv(config.output_path, ["parameter", "max_relative_error"], rows)}
        storage.write_manifest(_manifest(config, outputs), config.output_path)
    else:
        for name, error in rows:
            print(f"{name:<16} {error}", file=sys.stderr)
    structured_logger.log_gradient_check(kind.value, worst, passed, tolerance=tolerance)
    return 0 if passed else 1


def cmd_search(config: CliConfig) -> int:
    cohort = _load_cohort(config)
    task = _data_task(config, cohort, config.options.get("task"))
    space = get_search_space(config.options.get("profile"))
    base = config.train.copy(update={"task": task})
    with structured_logger.timed_operation("search", trials=config.options["trials"]):
        trials = random_search(cohort, base, space, config.options["trials"], seed=config.seed,
                               r=cohort.vocab.size if cohort.vocab else None)
    outputs = {"trials": storage.write_json(config.output_path, trials)}
    storage.write_manifest(_manifest(config, outputs), config.output_path)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "interpret": cmd_interpret,
    "gradcheck": cmd_gradcheck,
    "search": cmd_search,
}


def run(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    structured_logger.configure(args.log_level)

    try:
        config = resolve_config(args)
        return COMMANDS[config.subcommand](config)
    except (ArgumentError, CohortConfigError, ValidationError) as e:
        print(f"retain {args.subcommand}: error: {e}", file=sys.stderr)
        return 2
    except RetainError as e:
        structured_logger.error(f"❌ {type(e).__name__}: {e}", action=args.subcommand, status="failed")
        return 1


if __name__ == "__main__":
    sys.exit(run())
