"""Command-line entry point for the open-set traffic identification engine."""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from classification_flow import TrafficClassifier, result_record
from config import BUILD_ID, EngineConfig, __version__, load_engine_config
from data_models import VIEW_ORDER, Ablation, RandomizationPolicy, SplitSpec
from errors import ConfigError, EngineError
from eval_harness import (
    experiment_to_dict, format_experiment_report, load_experiment_dataset, run_experiment, sweep
)
from feature_norm import normalize_flow
from flow_ingest import load_dataset, parse_records, write_dataset
from retrieval import evidence_to_dict
from traffic_db import build_database, load_snapshot, save_snapshot
from utils.formatting import format_distance, render_table
from utils.logger import logger

PROG = "trafficrag"


class CliParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", type=Path, help="engine configuration file (key = value)")
    common.add_argument("--log-level", help="diagnostic log level (DEBUG, INFO, WARNING, ERROR)")
    return common


def _randomization_options() -> argparse.ArgumentParser:
    options = CliParser(add_help=False)
    options.add_argument("--randomize-seed", type=int, default=0, help="seed for strong-feature randomization")
    options.add_argument("--no-randomize", action="store_true", help="disable strong-feature randomization")
    return options


def _retrieval_options() -> argparse.ArgumentParser:
    options = CliParser(add_help=False)
    options.add_argument("--k", type=int, help="per-view neighbour cap")
    options.add_argument("--alpha", type=float, help="pruning tolerance")
    return options


def _prompt_options() -> argparse.ArgumentParser:
    options = CliParser(add_help=False)
    options.add_argument("--backend", choices=["mock", "remote"], help="answer-generation backend")
    options.add_argument("--reasoning", action="store_true", default=None, help="ask for reasoning before the answer")
    options.add_argument("--template", type=Path, help="prompt template file")
    options.add_argument("--display-cap", type=int, help="array elements shown per vector in prompts")
    options.add_argument("--jobs", type=int, default=1, help="flows classified concurrently")
    return options


def build_parser() -> CliParser:
    parser = CliParser(prog=PROG, description="Retrieval-augmented open-set malicious traffic identification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BUILD_ID})")
    sub = parser.add_subparsers(dest="command", metavar="{build-db,db-stats,query,classify,eval}")
    sub.required = True

    common = _common_options()
    randomization = _randomization_options()
    retrieval = _retrieval_options()
    prompt = _prompt_options()

    build = sub.add_parser("build-db", parents=[common, randomization], help="build a traffic database snapshot")
    build.add_argument("--input", type=Path, required=True, help="labeled flow records")
    build.add_argument("--out", type=Path, required=True, help="snapshot file to write")
    build.add_argument("--stats-exclude-self", action="store_true", default=None,
                       help="leave self-pairs out of the intra-class statistics")

    stats = sub.add_parser("db-stats", parents=[common], help="show database labels and group statistics")
    stats.add_argument("--db", type=Path, required=True, help="snapshot file")
    stats.add_argument("--json", action="store_true", help="machine-readable output")

    query = sub.add_parser("query", parents=[common, randomization, retrieval],
                           help="retrieve and prune evidence for flows")
    query.add_argument("--db", type=Path, required=True, help="snapshot file")
    query.add_argument("--flow", required=True, help="a record line or a file of record lines")
    query.add_argument("--json", action="store_true", help="machine-readable output")

    classify = sub.add_parser("classify", parents=[common, randomization, retrieval, prompt],
                              help="classify flows against a database")
    classify.add_argument("--db", type=Path, required=True, help="snapshot file")
    classify.add_argument("--input", type=Path, required=True, help="flow records to classify")
    classify.add_argument("--out", type=Path, help="results file (default: stdout)")
    classify.add_argument("--ablate-guidance", action="store_true", help="task instruction only, no guidance")

    evaluate = sub.add_parser("eval", parents=[common, randomization, retrieval, prompt],
                              help="run a split/classify/score experiment")
    evaluate.add_argument("--dataset", required=True, help="record file or synthetic:<settings>")
    evaluate.add_argument("--mode", choices=["known", "openset"], default="known")
    evaluate.add_argument("--ablation", choices=["full", "no-cer", "no-tap", "no-gp"], default="full")
    evaluate.add_argument("--seeds", help="comma-separated split seeds (default 0,1,2,3,4)")
    evaluate.add_argument("--db-fraction", type=float, default=0.8, help="share of each group used for the database")
    evaluate.add_argument("--novel-classes", help="comma-separated classes held out as novel")
    evaluate.add_argument("--stats-exclude-self", action="store_true", default=None,
                          help="leave self-pairs out of the intra-class statistics")
    evaluate.add_argument("--errors-as-wrong", action="store_true", help="score unparseable verdicts as wrong")
    evaluate.add_argument("--sweep-k", help="comma-separated k values to sweep")
    evaluate.add_argument("--sweep-alpha", help="comma-separated alpha values to sweep")
    evaluate.add_argument("--report", type=Path, help="report file (default: stdout)")
    evaluate.add_argument("--json", action="store_true", help="machine-readable report")
    evaluate.add_argument("--emit", type=Path, help="also write the loaded flows as canonical records")
    return parser


def _engine_config(args: argparse.Namespace) -> EngineConfig:
    overrides = {
        "k": getattr(args, "k", None),
        "alpha": getattr(args, "alpha", None),
        "backend": getattr(args, "backend", None),
        "reasoning": getattr(args, "reasoning", None),
        "template_path": getattr(args, "template", None),
        "display_cap": getattr(args, "display_cap", None),
        "stats_exclude_self": getattr(args, "stats_exclude_self", None),
    }
    return load_engine_config(args.config, overrides)


def _policy(args: argparse.Namespace) -> RandomizationPolicy:
    if args.no_randomize:
        return RandomizationPolicy.disabled()
    return RandomizationPolicy(seed=args.randomize_seed)


def _with_snapshot_norm(cfg: EngineConfig, db, config_given: bool) -> EngineConfig:
    if config_given and cfg.norm != db.norm_config:
        logger.warning(
            f"Config norm settings {cfg.norm.model_dump()} differ from the snapshot's "
            f"{db.norm_config.model_dump()} - using the snapshot's"
        )
    return cfg.model_copy(update={"norm": db.norm_config})


def _csv(value: Optional[str], convert, field: str) -> List:
    if not value:
        return []
    try:
        return [convert(part.strip()) for part in value.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list, got {value!r}", field=field) from None


def _emit(text: str, path: Optional[Path]):
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def cmd_build_db(args: argparse.Namespace) -> int:
    cfg = _engine_config(args)
    flows = load_dataset(args.input, _policy(args))
    db = build_database(flows, cfg.norm, cfg.stats_include_self)
    save_snapshot(db, args.out)
    return 0


def cmd_db_stats(args: argparse.Namespace) -> int:
    db = load_snapshot(args.db)
    table = db.stats_table()
    counts = db.class_counts()
    if args.json:
        payload = {
            "label_set": list(db.label_set),
            "class_counts": counts,
            "norm_config": db.norm_config.model_dump(),
            "stats_include_self": db.stats_include_self,
            "stats": table.to_dict(orient="records"),
        }
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
        return 0

    count_table = pd.DataFrame({"class": list(counts), "entries": list(counts.values())})
    sys.stdout.write(
        f"label_set: {', '.join(db.label_set)}\n"
        f"entries: {len(db)}\n\n"
        f"{render_table(count_table)}\n\n"
        f"{render_table(table, float_digits=6)}\n"
    )
    return 0


def _query_flows(flow_arg: str, policy: RandomizationPolicy):
    path = Path(flow_arg)
    if not flow_arg.lstrip().startswith("{") and path.exists():
        return load_dataset(path, policy)
    return parse_records([flow_arg], policy)


def cmd_query(args: argparse.Namespace) -> int:
    db = load_snapshot(args.db)
    cfg = _with_snapshot_norm(_engine_config(args), db, args.config is not None)
    flows = _query_flows(args.flow, _policy(args))
    classifier = TrafficClassifier(db, cfg)

    documents: Dict[str, dict] = {}
    rows = []
    for flow in flows:
        evidence = classifier.gather_evidence(flow, normalize_flow(flow, db.norm_config))
        documents[flow.flow_id] = evidence_to_dict(evidence)
        for view in VIEW_ORDER:
            for rank, item in enumerate(evidence.per_view[view], start=1):
                rows.append({
                    "query": flow.flow_id,
                    "view": view.value,
                    "rank": rank,
                    "flow_id": item.flow_id,
                    "class": item.class_label,
                    "level": item.protocol_level.value,
                    "distance": format_distance(item.distance),
                    "threshold": format_distance(item.threshold),
                    "kept": item.kept,
                })

    if args.json:
        sys.stdout.write(json.dumps(documents, indent=2) + "\n")
    else:
        sys.stdout.write(render_table(pd.DataFrame(rows)) + "\n")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    db = load_snapshot(args.db)
    cfg = _with_snapshot_norm(_engine_config(args), db, args.config is not None)
    flows = load_dataset(args.input, _policy(args))
    ablation = Ablation.NO_GP if args.ablate_guidance else Ablation.FULL
    classifier = TrafficClassifier(db, cfg, ablation=ablation)

    results = classifier.classify_batch(flows, jobs=args.jobs)
    lines = "".join(json.dumps(result_record(r), separators=(",", ":")) + "\n" for r in results)
    _emit(lines, args.out)
    failed = sum(r.failed for r in results)
    logger.info(f"Classified {len(results)} flows ({failed} unparseable)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _engine_config(args)
    seeds = _csv(args.seeds, int, "seeds")
    split = SplitSpec(db_fraction=args.db_fraction, seeds=tuple(seeds)) if seeds \
        else SplitSpec(db_fraction=args.db_fraction)
    ablation = Ablation(args.ablation.replace("-", "_"))
    novel_classes = _csv(args.novel_classes, str, "novel_classes")
    policy = _policy(args)
    if args.emit:
        known, novel = load_experiment_dataset(args.dataset, policy, novel_classes)
        write_dataset(args.emit, list(known) + list(novel))

    run_options = dict(policy=policy, novel_classes=novel_classes, jobs=args.jobs,
                       errors_as_wrong=args.errors_as_wrong)
    experiment = run_experiment(args.dataset, args.mode, ablation, cfg, split, **run_options)
    sweeps = {}
    for parameter, raw in (("k", args.sweep_k), ("alpha", args.sweep_alpha)):
        values = _csv(raw, int if parameter == "k" else float, f"sweep_{parameter}")
        if values:
            sweeps[parameter] = sweep(args.dataset, parameter, values, args.mode, ablation, cfg, split,
                                      **run_options)

    if args.json:
        payload = experiment_to_dict(experiment)
        payload["sweeps"] = {name: table.to_dict(orient="records") for name, table in sweeps.items()}
        text = json.dumps(payload, indent=2) + "\n"
    else:
        text = format_experiment_report(experiment)
        for name, table in sweeps.items():
            text += f"\n== sweep over {name} ==\n{render_table(table)}\n"
    _emit(text, args.report)
    return 0


COMMANDS = {
    "build-db": cmd_build_db,
    "db-stats": cmd_db_stats,
    "query": cmd_query,
    "classify": cmd_classify,
    "eval": cmd_eval,
}


def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else (0 if e.code is None else 1)

    if args.log_level:
        logger.set_level(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except EngineError as e:
        logger.log_error(e, args.command)
        return e.exit_code


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
