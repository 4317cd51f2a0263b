"""Experiment harness: stratified splits, known-class and open-set metrics, ablations and sweeps."""

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from classification_flow import TrafficClassifier
from config import EngineConfig, NormConfig
from data_models import (
    NOVEL_LABEL, VIEW_ORDER, Ablation, ClassificationResult, ClassMetrics, FlowRecord,
    MetricsReport, RandomizationPolicy, SplitSpec
)
from errors import ConfigError, MetricsValidationError
from feature_norm import normalize_flow
from flow_ingest import load_dataset, randomize_strong_features
from llm_client import LLMClient
from synthetic_data import generate_synthetic_openset, is_synthetic, parse_synthetic_spec
from traffic_db import build_database
from utils.distances import view_distance
from utils.formatting import confusion_frame, format_metric, metrics_frame, render_table
from utils.logger import logger

# Stand-in prediction for flows whose verdict could not be parsed (strict scoring)
ERROR_LABEL = "<error>"

LabelPair = Tuple[str, str]


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def stratified_split(flows: Sequence[FlowRecord], spec: SplitSpec, seed: int) -> Tuple[List[FlowRecord], List[FlowRecord]]:
    """Seeded per-(class, coarse protocol) split into database and test partitions.

    Each group of n >= 2 flows sends round(db_fraction * n), clamped to
    [1, n - 1], flows to the database. Both partitions keep input order.
    """
    groups: Dict[Tuple[str, str], List[int]] = defaultdict(list)
    for index, flow in enumerate(flows):
        if flow.label is None:
            raise MetricsValidationError(f"flow {flow.flow_id!r} has no label and cannot be split")
        groups[(flow.label, flow.proto_coarse)].append(index)

    rng = np.random.default_rng(seed)
    to_db = set()
    for key in sorted(groups):
        members = groups[key]
        n = len(members)
        if n == 1:
            logger.warning(f"Group {key[0]}/{key[1]} has a single flow - assigned to the database")
            to_db.add(members[0])
            continue
        n_db = min(max(_round_half_up(spec.db_fraction * n), 1), n - 1)
        order = rng.permutation(n)
        to_db.update(members[i] for i in order[:n_db])

    db_part = [flow for i, flow in enumerate(flows) if i in to_db]
    test_part = [flow for i, flow in enumerate(flows) if i not in to_db]
    logger.log_split(seed, len(db_part), len(test_part))
    return db_part, test_part


def _check_pairs(results: Sequence[LabelPair], label_space: Sequence[str]):
    if not results:
        raise MetricsValidationError("no results to evaluate")
    allowed = set(label_space) | {ERROR_LABEL}
    for true, predicted in results:
        if predicted not in allowed:
            raise MetricsValidationError(f"predicted label {predicted!r} is outside the label space")


def _per_class(y_true: List[str], y_pred: List[str], labels: List[str]) -> Dict[str, ClassMetrics]:
    precision, recall, _, support = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average=None, zero_division=0
    )
    metrics = {}
    for i, label in enumerate(labels):
        pre, rcl = float(precision[i]), float(recall[i])
        f1 = 2 * pre * rcl / (pre + rcl) if pre + rcl > 0 else 0.0
        metrics[label] = ClassMetrics(precision=pre, recall=rcl, f1=f1, support=int(support[i]))
    return metrics


def _macro(per_class: Dict[str, ClassMetrics], labels: Sequence[str]) -> Tuple[float, float, float]:
    """Macro precision, recall and F1 over the classes that occur among the true labels.

    A class with no test samples stays in the per-class table but does not
    enter the average.
    """
    supported = [per_class[label] for label in labels if per_class[label].support > 0]
    if not supported:
        raise MetricsValidationError("no known class has test samples")
    return (
        float(np.mean([m.precision for m in supported])),
        float(np.mean([m.recall for m in supported])),
        float(np.mean([m.f1 for m in supported])),
    )


def _confusion(y_true: List[str], y_pred: List[str], label_space: List[str]) -> Tuple[List[str], List[List[int]]]:
    labels = list(label_space)
    if ERROR_LABEL in y_pred:
        labels.append(ERROR_LABEL)
    matrix = confusion_matrix(y_true, y_pred, labels=labels)
    return labels, matrix.tolist()


def evaluate_known(results: Sequence[LabelPair], label_set: Optional[Sequence[str]] = None) -> MetricsReport:
    """One-vs-rest per-class precision, recall and F1 over the known classes, macro-averaged."""
    results = list(results)
    known = sorted(label_set) if label_set is not None else sorted({t for t, _ in results})
    label_space = [label for label in known if label != NOVEL_LABEL] + [NOVEL_LABEL]
    _check_pairs(results, label_space)
    for true, _ in results:
        if true not in known:
            raise MetricsValidationError(f"true label {true!r} is not a known class")

    y_true = [t for t, _ in results]
    y_pred = [p for _, p in results]
    per_class = _per_class(y_true, y_pred, known)
    macro_pre, macro_rcl, macro_f1 = _macro(per_class, known)
    labels, matrix = _confusion(y_true, y_pred, label_space)
    return MetricsReport(
        mode="known",
        macro_pre=macro_pre,
        macro_rcl=macro_rcl,
        macro_f1=macro_f1,
        per_class=per_class,
        confusion_labels=labels,
        confusion=matrix,
        sample_count=len(results),
    )


def evaluate_openset(results: Sequence[LabelPair], label_set: Optional[Sequence[str]] = None) -> MetricsReport:
    """Known-class macro metrics plus novel detection metrics and normalized accuracy.

    NA is the balanced mean of accuracy on known-truth samples (AKS) and on
    novel-truth samples (AUS).
    """
    results = list(results)
    if label_set is not None:
        known = sorted(label for label in label_set if label != NOVEL_LABEL)
    else:
        known = sorted({t for t, _ in results if t != NOVEL_LABEL})
    label_space = known + [NOVEL_LABEL]
    _check_pairs(results, label_space)

    known_pairs = [(t, p) for t, p in results if t != NOVEL_LABEL]
    novel_pairs = [(t, p) for t, p in results if t == NOVEL_LABEL]
    if not known_pairs or not novel_pairs:
        raise MetricsValidationError("open-set evaluation needs both known-class and novel samples")
    for true, _ in known_pairs:
        if true not in known:
            raise MetricsValidationError(f"true label {true!r} is not a known class")

    y_true = [t for t, _ in results]
    y_pred = [p for _, p in results]
    per_class = _per_class(y_true, y_pred, label_space)
    pre_k, rcl_k, f1_k = _macro(per_class, known)
    novel = per_class[NOVEL_LABEL]

    aks = sum(t == p for t, p in known_pairs) / len(known_pairs)
    aus = sum(p == NOVEL_LABEL for _, p in novel_pairs) / len(novel_pairs)
    labels, matrix = _confusion(y_true, y_pred, label_space)
    return MetricsReport(
        mode="openset",
        macro_pre=pre_k,
        macro_rcl=rcl_k,
        macro_f1=f1_k,
        per_class=per_class,
        confusion_labels=labels,
        confusion=matrix,
        pre_k=pre_k,
        rcl_k=rcl_k,
        pre_n=novel.precision,
        rcl_n=novel.recall,
        aks=aks,
        aus=aus,
        na=(aks + aus) / 2,
        sample_count=len(results),
    )


@dataclass
class ExperimentReport:
    """Per-seed metrics of one experiment plus their mean."""
    mode: str
    ablation: Ablation
    seeds: List[int]
    per_seed: List[MetricsReport]
    mean: Dict[str, float] = field(default_factory=dict)
    excluded: int = 0
    settings: Dict[str, object] = field(default_factory=dict)


def mean_metrics(reports: Sequence[MetricsReport]) -> Dict[str, float]:
    names = list(reports[0].scalar_metrics())
    return {name: float(np.mean([r.scalar_metrics()[name] for r in reports])) for name in names}


def load_experiment_dataset(dataset: Union[str, Path], policy: RandomizationPolicy,
                            novel_classes: Sequence[str] = ()) -> Tuple[List[FlowRecord], List[FlowRecord]]:
    """Known and held-out novel flows from a record file or a ``synthetic:`` dataset string."""
    dataset = str(dataset)
    if is_synthetic(dataset):
        spec = parse_synthetic_spec(dataset)
        known, novel = generate_synthetic_openset(spec)
        known = [randomize_strong_features(flow, policy) for flow in known]
        novel = [randomize_strong_features(flow, policy) for flow in novel]
        logger.info(f"Generated synthetic dataset: {len(known)} known / {len(novel)} novel flows")
        return known, novel

    flows = load_dataset(dataset, policy)
    held_out = set(novel_classes)
    known = [flow for flow in flows if flow.label not in held_out]
    novel = [flow for flow in flows if flow.label in held_out]
    return known, novel


def _score_pairs(results: List[ClassificationResult], errors_as_wrong: bool) -> Tuple[List[LabelPair], int]:
    pairs: List[LabelPair] = []
    excluded = 0
    for result in sorted(results, key=lambda r: r.flow_id):
        if result.failed:
            if not errors_as_wrong:
                excluded += 1
                continue
            pairs.append((result.true_label, ERROR_LABEL))
        else:
            pairs.append((result.true_label, result.predicted))
    return pairs, excluded


def run_on_flows(known: Sequence[FlowRecord], novel: Sequence[FlowRecord], mode: str, ablation: Ablation,
                 cfg: EngineConfig, split: SplitSpec = SplitSpec(), client: Optional[LLMClient] = None,
                 jobs: int = 1, errors_as_wrong: bool = False) -> ExperimentReport:
    """Split, build, classify and score once per seed."""
    if mode not in ("known", "openset"):
        raise ConfigError(f"unknown evaluation mode {mode!r}", field="mode")
    if mode == "openset" and not novel:
        raise MetricsValidationError("open-set mode needs at least one held-out novel class")

    client = client or LLMClient(cfg.backend)
    # held-out flows are scored against the novel label
    novel_tests = [
        FlowRecord(f.flow_id, NOVEL_LABEL, f.proto_fine, f.payload, f.pkt_lengths, f.iat_seconds, f.strong_spans)
        for f in novel
    ] if mode == "openset" else []

    per_seed: List[MetricsReport] = []
    excluded_total = 0
    for seed in split.seeds:
        db_part, test_part = stratified_split(known, split, seed)
        db = build_database(db_part, cfg.norm, cfg.stats_include_self)
        classifier = TrafficClassifier(db, cfg, ablation=ablation, client=client)
        results = classifier.classify_batch(list(test_part) + novel_tests, jobs=jobs)
        pairs, excluded = _score_pairs(results, errors_as_wrong)
        excluded_total += excluded

        if mode == "known":
            report = evaluate_known(pairs, db.label_set)
        else:
            report = evaluate_openset(pairs, db.label_set)
        report.excluded = excluded
        per_seed.append(report)
        logger.info(f"Seed {seed} - macro F1 {report.macro_f1:.4f} ({excluded} excluded)")

    return ExperimentReport(
        mode=mode,
        ablation=ablation,
        seeds=list(split.seeds),
        per_seed=per_seed,
        mean=mean_metrics(per_seed),
        excluded=excluded_total,
        settings={"k": cfg.retrieval.k, "alpha": cfg.retrieval.alpha, "backend": cfg.backend.identity},
    )


def run_experiment(dataset: Union[str, Path], mode: str, ablation: Ablation, cfg: EngineConfig,
                   split: SplitSpec = SplitSpec(), policy: Optional[RandomizationPolicy] = None,
                   novel_classes: Sequence[str] = (), client: Optional[LLMClient] = None,
                   jobs: int = 1, errors_as_wrong: bool = False) -> ExperimentReport:
    """Load a record file or ``synthetic:`` dataset and score it once per split seed.

    Novel classes of a record file are the labels named in ``novel_classes``;
    synthetic datasets bring their own held-out classes.
    """
    policy = policy if policy is not None else RandomizationPolicy()
    known, novel = load_experiment_dataset(dataset, policy, novel_classes)
    return run_on_flows(known, novel, mode, ablation, cfg, split, client, jobs, errors_as_wrong)


def with_retrieval(cfg: EngineConfig, **changes) -> EngineConfig:
    return cfg.model_copy(update={"retrieval": cfg.retrieval.model_copy(update=changes)})


def sweep(dataset: Union[str, Path], parameter: str, values: Iterable[float], mode: str, ablation: Ablation,
          cfg: EngineConfig, split: SplitSpec = SplitSpec(), policy: Optional[RandomizationPolicy] = None,
          novel_classes: Sequence[str] = (), client: Optional[LLMClient] = None, jobs: int = 1,
          errors_as_wrong: bool = False) -> pd.DataFrame:
    """Mean metrics of one experiment per value of ``k`` or ``alpha``."""
    if parameter not in ("k", "alpha"):
        raise ConfigError(f"can only sweep k or alpha, not {parameter!r}", field="sweep")
    rows = []
    for value in values:
        value = int(value) if parameter == "k" else float(value)
        report = run_experiment(dataset, mode, ablation, with_retrieval(cfg, **{parameter: value}), split,
                                policy, novel_classes, client, jobs, errors_as_wrong)
        rows.append({parameter: value, **report.mean, "excluded": report.excluded})
    return pd.DataFrame(rows)


def nearest_class_oracle(db_flows: Sequence[FlowRecord], test_flows: Sequence[FlowRecord],
                         cfg: NormConfig) -> List[LabelPair]:
    """Brute-force nearest-neighbour labels, one vote per view, ignoring protocol tags.

    Ties between views go to the label voted by the earliest view.
    """
    db_views = [(flow.label, normalize_flow(flow, cfg)) for flow in db_flows]
    pairs: List[LabelPair] = []
    for flow in test_flows:
        q = normalize_flow(flow, cfg)
        votes: List[str] = []
        for view in VIEW_ORDER:
            if view not in q.views_present:
                continue
            scored = [
                (view_distance(view, q.retrieval_vector(view), views.retrieval_vector(view)), label)
                for label, views in db_views if view in views.views_present
            ]
            if scored:
                votes.append(min(scored)[1])
        if not votes:
            pairs.append((flow.label, NOVEL_LABEL))
            continue
        counts = Counter(votes)
        top = max(counts.values())
        pairs.append((flow.label, next(label for label in votes if counts[label] == top)))
    return pairs


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "mode": report.mode,
        "metrics": report.scalar_metrics(),
        "na_definition": "(AKS + AUS) / 2" if report.na is not None else None,
        "per_class": {
            label: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}
            for label, m in report.per_class.items()
        },
        "confusion": {"labels": report.confusion_labels, "matrix": report.confusion},
        "sample_count": report.sample_count,
        "excluded": report.excluded,
    }


def experiment_to_dict(experiment: ExperimentReport) -> dict:
    return {
        "mode": experiment.mode,
        "ablation": experiment.ablation.value,
        "settings": experiment.settings,
        "seeds": {str(seed): report_to_dict(r) for seed, r in zip(experiment.seeds, experiment.per_seed)},
        "mean": experiment.mean,
        "excluded": experiment.excluded,
    }


def format_metrics_report(report: MetricsReport) -> str:
    lines = [f"{name}: {format_metric(value)}" for name, value in report.scalar_metrics().items()]
    if report.na is not None:
        lines.append("na = (AKS + AUS) / 2")
    lines.append(f"samples: {report.sample_count}, excluded: {report.excluded}")

    per_class = pd.DataFrame([
        {"class": label, "precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support}
        for label, m in report.per_class.items()
    ])
    lines += ["", "per-class:", render_table(per_class)]
    lines += ["", "confusion:", confusion_frame(report.confusion_labels, report.confusion).to_string()]
    return "\n".join(lines)


def format_experiment_report(experiment: ExperimentReport) -> str:
    """Text report: one block per seed, then the mean block."""
    header = (
        f"mode: {experiment.mode}  ablation: {experiment.ablation.value}  "
        + "  ".join(f"{key}: {value}" for key, value in experiment.settings.items())
    )
    blocks = [header]
    for seed, report in zip(experiment.seeds, experiment.per_seed):
        blocks.append(f"== seed {seed} ==\n{format_metrics_report(report)}")

    mean_rows = {str(seed): r.scalar_metrics() for seed, r in zip(experiment.seeds, experiment.per_seed)}
    mean_rows["mean"] = experiment.mean
    blocks.append(
        f"== mean over {len(experiment.seeds)} seeds ==\n"
        f"{render_table(metrics_frame(mean_rows))}\n"
        f"excluded: {experiment.excluded}"
    )
    return "\n\n".join(blocks) + "\n"
