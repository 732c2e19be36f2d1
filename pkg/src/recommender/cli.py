"""Command-line workflows: datagen, train, evaluate, explain, sweeps, ablations and gradcheck."""
import argparse
import logging
import logging.config
import os
import sys
from dataclasses import asdict, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .config import HyperParams, RunConfig, build_run_config
from .datagen import generate_synthetic, split_dataset
from .exceptions import NumericalError, RankerError, RecommenderBaseException, UsageError, ValidationError
from .fileio import (
    load_checkpoint,
    load_evidence_pool,
    load_interactions,
    load_meta,
    remap_evidence_pool,
    save_checkpoint,
    save_evidence_pool,
    save_interactions,
    save_meta,
    save_table,
    train_log_frame,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import (
    ABLATIONS,
    aggregate_reports,
    evaluate,
    format_report,
    report_frame,
    sweep_k,
    sweep_shift,
    variant_hyperparams,
)
from .models import Checkpoint, InteractionDataset
from .recommender import Recommender
from .retriever import embed_evidence
from .trainer import fit
from src.utils import (
    validate_file_path,
    validate_input_file,
    validate_intensities,
    validate_k_values,
    validate_output_directory,
    validate_seed_count,
)

logger = logging.getLogger(__name__)

INTERACTIONS_FILE = "interactions.tsv"
EVIDENCE_FILE = "evidence.jsonl"
META_FILE = "meta.json"
CHECKPOINT_FILE = "checkpoint.json"
POOL_STATS_FILE = "pool_stats.jsonl"
TRAIN_LOG_FILE = "train_log.csv"
MANIFEST_FILE = "run-manifest"
EVAL_SETTINGS = ("seed", "tau_cite", "eval_negatives", "full_catalog", "max_eval_cases", "key_selection")

# flag -> (section, field)
OVERRIDES = {
    "seed": ("hyperparams", "seed"),
    "k": ("hyperparams", "k"),
    "lambda1": ("hyperparams", "lambda1"),
    "lambda2": ("hyperparams", "lambda2"),
    "alpha": ("hyperparams", "alpha"),
    "dim": ("hyperparams", "dim"),
    "lr": ("hyperparams", "lr"),
    "batch_size": ("hyperparams", "batch_size"),
    "epochs1": ("hyperparams", "t1"),
    "epochs2": ("hyperparams", "t2"),
    "max_eval_cases": ("hyperparams", "max_eval_cases"),
    "shift_intensity": ("synth", "shift_intensity"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError("usage", message)


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Parse the YAML config; a missing default file means built-in defaults."""
    if path is None:
        path = os.getenv("CIRR_CONFIG", "config.yaml")
        if not os.path.exists(path):
            return {}
    validate_input_file(path, "Config file")
    with open(path, "r") as f:
        return yaml.safe_load(f) or {}


def setup_logging(config: RunConfig) -> None:
    """Set up logging configuration."""
    os.makedirs("logs", exist_ok=True)
    logging.config.dictConfig(config.settings.logging_config)
    level = os.getenv("CIRR_LOG_LEVEL")
    if level:
        logging.getLogger().setLevel(level.upper())


def _split_assignment(text: str):
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise UsageError("usage", f"--set expects section.key=value, got {text!r}")
    key, value = text.split("=", 1)
    section, name = key.split(".", 1)
    return section, name, yaml.safe_load(value)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < --set assignments < dedicated flags."""
    raw = load_config_file(args.config)
    for assignment in getattr(args, "set", None) or []:
        section, name, value = _split_assignment(assignment)
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ValidationError("bad-config", f"section {section} must be a mapping")
        raw[section][name] = value
    for flag, (section, name) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            raw.setdefault(section, {})[name] = value
    if getattr(args, "out", None):
        raw.setdefault("settings", {})["output_dir"] = args.out
    config = build_run_config(raw)
    config.validate()
    return config


def _write_manifest(config: RunConfig, command: str, argv: Sequence[str], extra: Optional[Dict[str, Any]] = None) -> None:
    manifest = {
        "tool": "cirr",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(config.settings.output_dir, MANIFEST_FILE)
    validate_file_path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(manifest, f, sort_keys=True, default_flow_style=False)


def _data_paths(data_dir: str):
    interactions = os.path.join(data_dir, INTERACTIONS_FILE)
    evidence = os.path.join(data_dir, EVIDENCE_FILE)
    validate_input_file(interactions, "Interactions file")
    validate_input_file(evidence, "Evidence file")
    return interactions, evidence


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError("usage", f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError("usage", f"expected comma-separated numbers, got {text!r}")


# Commands

def cmd_datagen(args, config: RunConfig, argv) -> int:
    out = config.settings.output_dir
    validate_output_directory(out)
    synth = config.synth if args.seed is None else replace(config.synth, seed=args.seed)
    dataset, pool, truth = generate_synthetic(synth)
    save_interactions(dataset, os.path.join(out, INTERACTIONS_FILE))
    save_evidence_pool(pool, os.path.join(out, EVIDENCE_FILE))
    save_meta(truth.meta(synth, dataset, pool), os.path.join(out, META_FILE))
    _write_manifest(replace(config, synth=synth), "datagen", argv)
    return 0


def _load_dataset(args, config: RunConfig):
    """Interactions and evidence in dense ids; meta.json, when present, fixes the catalog sizes."""
    interactions_path, evidence_path = _data_paths(args.data)
    meta_path = os.path.join(args.data, META_FILE)
    meta = load_meta(meta_path) if os.path.exists(meta_path) else {}
    dataset = load_interactions(interactions_path, num_items=meta.get("num_items"), num_envs=meta.get("num_envs"))
    pool = remap_evidence_pool(load_evidence_pool(evidence_path), dataset)
    return dataset, pool


def _previous_log(path: str, start) -> Optional[pd.DataFrame]:
    if not os.path.exists(path):
        return None
    frame = pd.read_csv(path)
    before = (frame["stage"] < start[0]) | ((frame["stage"] == start[0]) & (frame["epoch"] < start[1]))
    return frame[before]


def cmd_train(args, config: RunConfig, argv) -> int:
    out = config.settings.output_dir
    validate_output_directory(out)
    dataset, pool = _load_dataset(args, config)
    hp = config.hyperparams
    stages = {"1": (1,), "2": (2,), "all": (1, 2)}[args.stage]
    checkpoint_path = os.path.join(out, CHECKPOINT_FILE)
    stats_path = os.path.join(out, POOL_STATS_FILE)
    params = adam = None
    start = (stages[0], 0)
    pool_has_stability = False
    if args.resume:
        validate_input_file(args.resume, "Checkpoint")
        ckpt = load_checkpoint(args.resume)
        hp = HyperParams(**ckpt.hyperparams)
        params, adam = ckpt.params, ckpt.adam
        start = (int(ckpt.rng_state["stage"]), int(ckpt.rng_state["next_epoch"]))
        if start[0] == 2:
            validate_input_file(stats_path, "Stability statistics")
            pool = load_evidence_pool(stats_path)
            pool_has_stability = True
        logger.info(f"Resuming from stage {start[0]}, epoch {start[1]}")
    elif args.stage == "2":
        source = args.checkpoint or checkpoint_path
        validate_input_file(source, "Stage-1 checkpoint")
        ckpt = load_checkpoint(source)
        params, adam = ckpt.params, ckpt.adam
    split = split_dataset(dataset, config.split.train_envs, hp.max_len)

    def on_epoch_end(stage, epoch, p, a):
        rng_state = {"seed": hp.seed, "stage": stage, "next_epoch": epoch + 1}
        save_checkpoint(checkpoint_path, Checkpoint(p, a, asdict(hp), rng_state))

    result = fit(
        dataset, split, pool, hp, stages, params, adam, start, pool_has_stability,
        on_epoch_end=on_epoch_end,
        on_pool_ready=lambda ready: save_evidence_pool(ready, stats_path),
    )
    last_stage = stages[-1]
    rng_state = {"seed": hp.seed, "stage": last_stage, "next_epoch": hp.t1 if last_stage == 1 else hp.t2}
    save_checkpoint(checkpoint_path, Checkpoint(result.params, result.adam, asdict(hp), rng_state))
    save_evidence_pool(result.pool, stats_path)
    frame = train_log_frame(result.log)
    previous = _previous_log(os.path.join(out, TRAIN_LOG_FILE), start) if start != (1, 0) else None
    if previous is not None:
        frame = pd.concat([previous, frame], ignore_index=True)
    save_table(frame, os.path.join(out, TRAIN_LOG_FILE))
    _write_manifest(replace(config, hyperparams=hp), "train", argv, {"stages": list(stages)})
    return 0


def _load_model(args, config: RunConfig):
    """Checkpoint parameters, stability-annotated pool and the hyper-parameters to serve with.

    Training-time values come from the checkpoint, evaluation settings from the resolved
    config; ``--k`` and ``--alpha`` re-tune retrieval of a frozen model.
    """
    out = config.settings.output_dir
    checkpoint = args.checkpoint or os.path.join(out, CHECKPOINT_FILE)
    validate_input_file(checkpoint, "Checkpoint")
    ckpt = load_checkpoint(checkpoint)
    stats = args.pool_stats or os.path.join(os.path.dirname(checkpoint), POOL_STATS_FILE)
    validate_input_file(stats, "Stability statistics")
    changes = {name: getattr(config.hyperparams, name) for name in EVAL_SETTINGS}
    changes.update({name: getattr(args, name) for name in ("k", "alpha") if getattr(args, name, None) is not None})
    hp = replace(HyperParams(**ckpt.hyperparams), **changes)
    hp.validate()
    pool = embed_evidence(load_evidence_pool(stats), ckpt.params)
    if hp.k > 0 and len(pool) and not np.any(pool.stability_vector):
        logger.warning(
            f"every stability value in {stats} is zero (trained with K=0?); retrieval with K={hp.k} ranks by similarity only"
        )
    return Recommender(ckpt.params, pool, hp)


def _write_reports(out: str, reports, summary: Optional[pd.DataFrame]) -> None:
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(format_report(reports[0], summary))
    frames = [report_frame(r).assign(seed=r.seed)[["seed", "metric", "value"]] for r in reports]
    save_table(pd.concat(frames, ignore_index=True), os.path.join(out, "report.csv"))
    if summary is not None:
        save_table(summary, os.path.join(out, "report_summary.csv"))


def cmd_evaluate(args, config: RunConfig, argv) -> int:
    out = config.settings.output_dir
    validate_output_directory(out)
    validate_seed_count(args.seeds)
    dataset, _ = _load_dataset(args, config)
    model = _load_model(args, config)
    split = split_dataset(dataset, config.split.train_envs, model.hp.max_len)
    reports = [evaluate(model, split, dataset.num_items, model.hp, seed=model.hp.seed + i) for i in range(args.seeds)]
    summary = aggregate_reports(reports) if args.seeds > 1 else None
    _write_reports(out, reports, summary)
    _write_manifest(replace(config, hyperparams=model.hp), "evaluate", argv)
    return 0


def _user_context(dataset: InteractionDataset, user: int, max_len: int) -> List[int]:
    history = dataset.by_user.get(user)
    if not history:
        raise ValidationError("unknown-user", f"user {user} has no interactions")
    return [x.item_id for x in history][-max_len:]


def cmd_explain(args, config: RunConfig, argv) -> int:
    """Ranked list and explanation for one user; ids on the command line and in the output are raw."""
    dataset, _ = _load_dataset(args, config)
    model = replace(_load_model(args, config), item_label=dataset.raw_item)
    user = dataset.dense_user(args.user)
    context = _user_context(dataset, user, model.hp.max_len)
    ranked = model.recommend(user, context, top_n=args.top)
    print(f"Top {len(ranked)} items for user {args.user}:")
    for position, (item, score) in enumerate(ranked, start=1):
        print(f"{position}\t{dataset.raw_item(item)}\t{score:.6f}")
    best = dataset.dense_item(args.item) if args.item is not None else ranked[0][0]
    print()
    try:
        retrieved, _, explanation = model.explain(user, context, best)
    except RankerError as e:
        if e.code != "no-evidence":
            raise
        print(f"No evidence retrieved for item {dataset.raw_item(best)} (K={model.hp.k}); nothing to cite.")
        return 0
    print(explanation.text)
    print()
    print("Retrieved evidence:")
    for line in retrieved.to_lines(model.pool):
        print(line)
    print("Citations:")
    for line in explanation.sidecar_lines():
        print(line)
    return 0


def cmd_sweep_k(args, config: RunConfig, argv) -> int:
    out = config.settings.output_dir
    validate_output_directory(out)
    k_values = _int_list(args.k_values)
    validate_k_values(k_values)
    dataset, _ = _load_dataset(args, config)
    model = _load_model(args, config)
    split = split_dataset(dataset, config.split.train_envs, model.hp.max_len)
    save_table(sweep_k(model, split, dataset.num_items, model.hp, k_values), os.path.join(out, "sweep_k.csv"))
    _write_manifest(config, "sweep-k", argv, {"k_values": k_values})
    return 0


def cmd_sweep_shift(args, config: RunConfig, argv) -> int:
    out = config.settings.output_dir
    validate_output_directory(out)
    intensities = _float_list(args.intensities)
    validate_intensities(intensities)
    validate_seed_count(args.seeds)
    table = sweep_shift(config.synth, intensities, config.hyperparams, range(args.seeds), config.split.train_envs)
    save_table(table, os.path.join(out, "sweep_shift.csv"))
    _write_manifest(config, "sweep-shift", argv, {"intensities": intensities})
    return 0


def cmd_ablate(args, config: RunConfig, argv) -> int:
    out = config.settings.output_dir
    validate_output_directory(out)
    validate_seed_count(args.seeds)
    chosen = [v for v, flag in (("no_causal", args.no_causal), ("no_rag", args.no_rag), ("no_faithful", args.no_faithful)) if flag]
    variants = ["full"] + (chosen or ["no_causal", "no_rag", "no_faithful"])
    dataset, pool = _load_dataset(args, config)
    rows = []
    for variant in variants:
        hp = variant_hyperparams(config.hyperparams, variant)
        split = split_dataset(dataset, config.split.train_envs, hp.max_len)
        reports = []
        for i in range(args.seeds):
            seeded = replace(hp, seed=hp.seed + i)
            result = fit(dataset, split, pool, seeded)
            model = Recommender(result.params, result.pool, seeded)
            reports.append(evaluate(model, split, dataset.num_items, seeded))
        summary = aggregate_reports(reports)
        variant_dir = os.path.join(out, variant)
        validate_output_directory(variant_dir)
        _write_reports(variant_dir, reports, summary if args.seeds > 1 else None)
        rows.append(summary.assign(variant=variant)[["variant", "metric", "mean", "stdev"]])
        logger.info(f"Variant {variant} ({ABLATIONS[variant]}): done over {args.seeds} seeds")
    save_table(pd.concat(rows, ignore_index=True), os.path.join(out, "ablation.csv"))
    _write_manifest(config, "ablate", argv, {"variants": variants})
    return 0


def cmd_gradcheck(args, config: RunConfig, argv) -> int:
    worst = run_gradcheck(args.instances, args.seed if args.seed is not None else 0)
    for name, err in sorted(worst.items()):
        print(f"{name}\t{err:.3e}")
    failing = [name for name, err in worst.items() if err >= TOLERANCE]
    if failing:
        raise NumericalError("gradcheck-failed", f"{len(failing)} gradients exceed relative error {TOLERANCE}: {', '.join(sorted(failing))}")
    print(f"all {len(worst)} gradients within {TOLERANCE}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (default: $CIRR_CONFIG or config.yaml)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--k", type=int, help="retrieved evidence per query (0 disables retrieval)")
    model_flags.add_argument("--lambda1", type=float, help="invariance penalty weight")
    model_flags.add_argument("--lambda2", type=float, help="consistency loss weight")
    model_flags.add_argument("--alpha", type=float, help="semantic vs. stability blend")
    model_flags.add_argument("--dim", type=int, help="embedding dimension")
    model_flags.add_argument("--lr", type=float, help="Adam learning rate")
    model_flags.add_argument("--batch-size", type=int, help="mini-batch size")
    model_flags.add_argument("--epochs1", type=int, help="stage-1 epochs")
    model_flags.add_argument("--epochs2", type=int, help="stage-2 epochs")
    model_flags.add_argument("--max-eval-cases", type=int, help="held-out cases per environment (0 = all)")

    data_flags = argparse.ArgumentParser(add_help=False)
    data_flags.add_argument("--data", required=True, help="directory with interactions.tsv and evidence.jsonl")

    model_files = argparse.ArgumentParser(add_help=False)
    model_files.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.json)")
    model_files.add_argument("--pool-stats", help="stability-annotated pool (default: next to the checkpoint)")

    parser = _Parser(prog="cirr", description="Causal-invariant retrieval-augmented recommender")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("datagen", parents=[common], help="write a synthetic dataset and evidence pool")
    p.add_argument("--shift-intensity", type=float, help="test-time spurious flip magnitude in [0, 1]")
    p.set_defaults(handler=cmd_datagen)

    p = sub.add_parser("train", parents=[common, model_flags, data_flags], help="run the two training stages")
    p.add_argument("--stage", choices=["1", "2", "all"], default="all", help="which stages to run")
    p.add_argument("--checkpoint", help="stage-1 checkpoint for --stage 2 (default: <out>/checkpoint.json)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, model_flags, data_flags, model_files], help="per-environment report")
    p.add_argument("--seeds", type=int, default=1, help="number of evaluation sampling seeds")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("explain", parents=[common, model_flags, data_flags, model_files], help="explain one user's top item")
    p.add_argument("--user", type=int, required=True, help="user id")
    p.add_argument("--item", type=int, help="item to explain (default: the top recommendation)")
    p.add_argument("--top", type=int, default=10, help="length of the ranked list")
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("sweep-k", parents=[common, model_flags, data_flags, model_files], help="retrieval size sweep")
    p.add_argument("--k-values", default="0,5,10,20,50", help="comma-separated K values")
    p.set_defaults(handler=cmd_sweep_k)

    p = sub.add_parser("sweep-shift", parents=[common, model_flags], help="shift-intensity sweep on generated data")
    p.add_argument("--intensities", default="0,0.25,0.5", help="comma-separated shift intensities")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per intensity")
    p.set_defaults(handler=cmd_sweep_shift)

    p = sub.add_parser("ablate", parents=[common, model_flags, data_flags], help="ablation matrix")
    p.add_argument("--no-causal", action="store_true", help="variant with lambda1 = 0")
    p.add_argument("--no-rag", action="store_true", help="variant with K = 0")
    p.add_argument("--no-faithful", action="store_true", help="variant with lambda2 = 0")
    p.add_argument("--seeds", type=int, default=1, help="training seeds per variant")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of the analytic gradients")
    p.add_argument("--instances", type=int, default=100, help="random instances per gradient")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def dispatch(argv: Sequence[str]) -> int:
    """Run one command; 0 on success, 1 on runtime failure, 2 on usage errors."""
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e.code}: {e.message}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    try:
        config = resolve_config(args)
        setup_logging(config)
        logger.info(f"Running {args.command}")
        code = args.handler(args, config, argv)
        logger.info(f"{args.command} completed successfully")
        return code
    except UsageError as e:
        print(f"error: {e.code}: {e.message}", file=sys.stderr)
        return 2
    except RecommenderBaseException as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e.code}: {e.message}", file=sys.stderr)
        return 1
