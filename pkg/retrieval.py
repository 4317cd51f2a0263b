"""Two-stage adaptive retrieval: per-view top-k screening followed by class-aware pruning."""

import hashlib
import json
from typing import Dict, List, Tuple

from config import RetrievalConfig
from data_models import VIEW_ORDER, EvidenceItem, EvidenceSet, NormalizedViews, View
from errors import InternalConsistencyError
from traffic_db import TrafficDatabase
from utils.distances import payload_distance, spectral_distance, view_distance
from utils.logger import logger

__all__ = [
    "payload_distance", "spectral_distance", "coverage_enhanced_retrieval",
    "adaptive_prune", "retrieve", "evidence_to_dict", "evidence_digest",
]

PerViewEvidence = Dict[View, Tuple[EvidenceItem, ...]]


def coverage_enhanced_retrieval(db: TrafficDatabase, q: NormalizedViews, proto_fine: str,
                                cfg: RetrievalConfig) -> PerViewEvidence:
    """Protocol-filtered top-k nearest neighbours for every view shared by the query and the db.

    Items come back sorted by (distance, flow_id); nothing is pruned yet, so
    every item still has an infinite threshold.
    """
    if len(db) == 0:
        raise InternalConsistencyError("retrieval against an empty database")

    results: PerViewEvidence = {}
    for view in VIEW_ORDER:
        if view not in q.views_present or view not in db.views_available:
            results[view] = ()
            continue

        level, candidates = db.resolve_candidates(proto_fine, view)
        query_vec = q.retrieval_vector(view)
        scored: List[EvidenceItem] = [
            EvidenceItem(
                flow_id=entry.flow_id,
                class_label=entry.class_label,
                view=view,
                distance=view_distance(view, query_vec, entry.views.retrieval_vector(view)),
                protocol_level=level,
            )
            for entry in candidates
        ]
        scored.sort(key=lambda item: (item.distance, item.flow_id))
        results[view] = tuple(scored[:cfg.k])
    return results


def adaptive_prune(items: PerViewEvidence, db: TrafficDatabase,
                   cfg: RetrievalConfig, enforce: bool = True) -> EvidenceSet:
    """Apply tau = mean + alpha * std per (class, protocol, view) and keep items with distance <= tau.

    With ``enforce`` off every item is kept but its threshold is still recorded.
    """
    pruned: PerViewEvidence = {}
    for view in VIEW_ORDER:
        refined = []
        for item in items.get(view, ()):
            entry = db.get_entry(item.flow_id)
            if entry is None:
                raise InternalConsistencyError(f"evidence references unknown flow {item.flow_id!r}")
            stats = db.get_stats(item.class_label, item.protocol_level,
                                 entry.protocol_tag(item.protocol_level), view)
            threshold = stats.threshold(cfg.alpha)
            kept = item.distance <= threshold if enforce else True
            refined.append(EvidenceItem(
                flow_id=item.flow_id,
                class_label=item.class_label,
                view=view,
                distance=item.distance,
                protocol_level=item.protocol_level,
                threshold=threshold,
                kept=kept,
            ))
        pruned[view] = tuple(refined)
    return EvidenceSet.from_per_view(pruned)


def retrieve(db: TrafficDatabase, q: NormalizedViews, proto_fine: str, cfg: RetrievalConfig,
             prune: bool = True, flow_id: str = "<query>") -> EvidenceSet:
    """Screening plus pruning; ``prune=False`` keeps every top-k item."""
    initial = coverage_enhanced_retrieval(db, q, proto_fine, cfg)
    evidence = adaptive_prune(initial, db, cfg, enforce=prune)
    logger.log_retrieval(flow_id, evidence.retrieved_counts(), len(evidence.pool))
    return evidence


def evidence_to_dict(evidence: EvidenceSet) -> dict:
    """Canonical, JSON-serializable form of an EvidenceSet."""
    def item_dict(item: EvidenceItem) -> dict:
        return {
            "flow_id": item.flow_id,
            "class_label": item.class_label,
            "view": item.view.value,
            "distance": item.distance,
            "protocol_level": item.protocol_level.value,
            "threshold": item.threshold if item.threshold != float("inf") else None,
            "kept": item.kept,
        }

    return {
        "per_view": {view.value: [item_dict(i) for i in evidence.per_view.get(view, ())] for view in VIEW_ORDER},
        "pool": [item_dict(i) for i in evidence.pool],
    }


def evidence_digest(evidence: EvidenceSet) -> str:
    canonical = json.dumps(evidence_to_dict(evidence), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
