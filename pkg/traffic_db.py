"""Multi-view traffic knowledge base with cached class/protocol distance statistics."""

import hashlib
import json
import math
import os
import struct
import zlib
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import NormConfig
from data_models import (
    VIEW_ORDER, ClassProtocolStats, DbEntry, FlowRecord, NormalizedViews,
    ProtocolLevel, StatsKey, View
)
from errors import FlowValidationError, InputValidationError, InternalConsistencyError, SnapshotError
from feature_norm import normalize_flow
from utils.distances import pairwise_block
from utils.logger import logger

SNAPSHOT_MAGIC = b"MRAGSNAP"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct(">8sHQ32s")

# Rows of the pairwise distance matrix computed per block
_ROW_BLOCK = 64


def _pairwise_blocks(view: View, vectors: np.ndarray, include_self: bool):
    n = vectors.shape[0]
    for start in range(0, n, _ROW_BLOCK):
        block = pairwise_block(view, vectors[start:start + _ROW_BLOCK], vectors)
        if not include_self:
            rows = np.arange(start, start + block.shape[0])[:, None]
            block = block[np.arange(n)[None, :] > rows]
        yield block


def compute_stats(group: Sequence[np.ndarray], view: View, include_self: bool = True) -> Tuple[float, float]:
    """Mean and standard deviation of intra-group distances.

    With ``include_self`` every ordered pair (i, j), self-pairs included, is
    averaged over |S|^2. Otherwise only distinct unordered pairs are used.
    Singleton groups give (0, 0) either way.
    """
    if len(group) == 0:
        raise InternalConsistencyError("compute_stats called on an empty group")
    vectors = np.stack([np.asarray(v) for v in group])
    n = vectors.shape[0]
    if n == 1:
        return 0.0, 0.0
    pair_count = n * n if include_self else n * (n - 1) // 2

    total = sum(float(block.sum()) for block in _pairwise_blocks(view, vectors, include_self))
    mean = total / pair_count
    squared = sum(float(((block - mean) ** 2).sum()) for block in _pairwise_blocks(view, vectors, include_self))
    return mean, math.sqrt(squared / pair_count)


def _group_entries(entries: Iterable[DbEntry]) -> Dict[StatsKey, List[DbEntry]]:
    groups: Dict[StatsKey, List[DbEntry]] = defaultdict(list)
    for entry in entries:
        for view in VIEW_ORDER:
            if view not in entry.views.views_present:
                continue
            for level in ProtocolLevel:
                groups[(entry.class_label, level, entry.protocol_tag(level), view)].append(entry)
    return groups


def _stats_for_groups(groups: Dict[StatsKey, List[DbEntry]], include_self: bool) -> Dict[StatsKey, ClassProtocolStats]:
    stats: Dict[StatsKey, ClassProtocolStats] = {}
    for key in sorted(groups, key=_stats_sort_key):
        class_label, level, tag, view = key
        members = groups[key]
        mean, std = compute_stats([m.views.retrieval_vector(view) for m in members], view, include_self)
        stats[key] = ClassProtocolStats(class_label, level, tag, view, mean, std, len(members))
        if len(members) == 1 and level is ProtocolLevel.FINE:
            logger.log_degenerate_group(class_label, level.value, tag, view.value)
    return stats


def _stats_sort_key(key: StatsKey):
    class_label, level, tag, view = key
    return (class_label, level.value, tag, VIEW_ORDER.index(view))


class TrafficDatabase:
    """Immutable collection of stored flows plus cached intra-class statistics."""

    def __init__(self, entries: Sequence[DbEntry], stats: Dict[StatsKey, ClassProtocolStats],
                 norm_config: NormConfig, stats_include_self: bool = True):
        self.entries: Tuple[DbEntry, ...] = tuple(entries)
        self.stats: Dict[StatsKey, ClassProtocolStats] = dict(stats)
        self.norm_config = norm_config
        self.stats_include_self = stats_include_self
        self.label_set: Tuple[str, ...] = tuple(sorted({e.class_label for e in self.entries}))

        self._by_id: Dict[str, DbEntry] = {}
        self._by_protocol: Dict[Tuple[ProtocolLevel, str], List[DbEntry]] = defaultdict(list)
        for entry in self.entries:
            if entry.flow_id in self._by_id:
                raise FlowValidationError(f"duplicate flow_id {entry.flow_id!r} in database", field="flow_id")
            self._by_id[entry.flow_id] = entry
            for level in ProtocolLevel:
                self._by_protocol[(level, entry.protocol_tag(level))].append(entry)

        self.views_available = frozenset(
            view for view in VIEW_ORDER if any(view in e.views.views_present for e in self.entries)
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrafficDatabase):
            return NotImplemented
        return (
            self.entries == other.entries
            and self.stats == other.stats
            and self.norm_config == other.norm_config
            and self.stats_include_self == other.stats_include_self
            and self.label_set == other.label_set
        )

    __hash__ = None

    def get_entry(self, flow_id: str) -> Optional[DbEntry]:
        return self._by_id.get(flow_id)

    def resolve_candidates(self, proto_fine: str, view: View) -> Tuple[Optional[ProtocolLevel], List[DbEntry]]:
        """Hierarchical protocol filter: exact fine tag first, coarse tag as fallback."""
        fine = [e for e in self._by_protocol.get((ProtocolLevel.FINE, proto_fine), ())
                if view in e.views.views_present]
        if fine:
            return ProtocolLevel.FINE, fine
        coarse_tag = proto_fine.split("|", 1)[0]
        coarse = [e for e in self._by_protocol.get((ProtocolLevel.COARSE, coarse_tag), ())
                  if view in e.views.views_present]
        if coarse:
            return ProtocolLevel.COARSE, coarse
        return None, []

    def candidate_set(self, proto_fine: str, view: View) -> List[DbEntry]:
        return self.resolve_candidates(proto_fine, view)[1]

    def get_stats(self, class_label: str, level: ProtocolLevel, protocol_tag: str, view: View) -> ClassProtocolStats:
        stats = self.stats.get((class_label, level, protocol_tag, view))
        if stats is None:
            raise InternalConsistencyError(
                f"no cached stats for {class_label}/{level.value}:{protocol_tag}/{view.value}"
            )
        return stats

    def extend(self, flows: Sequence[FlowRecord]) -> "TrafficDatabase":
        """New database with ``flows`` added; stats of untouched groups are reused as-is."""
        new_entries = _entries_from_flows(flows, self.norm_config)
        touched = _group_entries(new_entries)
        entries = self.entries + tuple(new_entries)
        all_groups = _group_entries(entries)
        recomputed = _stats_for_groups({k: all_groups[k] for k in touched}, self.stats_include_self)
        stats = dict(self.stats)
        stats.update(recomputed)
        return TrafficDatabase(entries, stats, self.norm_config, self.stats_include_self)

    def stats_table(self) -> pd.DataFrame:
        rows = [
            {
                "class": s.class_label,
                "level": s.level.value,
                "protocol": s.protocol_tag,
                "view": s.view.value,
                "count": s.sample_count,
                "mean": s.mean_dist,
                "std": s.std_dist,
            }
            for s in (self.stats[key] for key in sorted(self.stats, key=_stats_sort_key))
        ]
        return pd.DataFrame(rows, columns=["class", "level", "protocol", "view", "count", "mean", "std"])

    def class_counts(self) -> Dict[str, int]:
        counts = {label: 0 for label in self.label_set}
        for entry in self.entries:
            counts[entry.class_label] += 1
        return counts


def _entries_from_flows(flows: Sequence[FlowRecord], cfg: NormConfig) -> List[DbEntry]:
    entries = []
    for flow in flows:
        if not flow.label:
            raise FlowValidationError(f"flow {flow.flow_id!r} has no label; database flows must be labeled",
                                      field="label")
        entries.append(DbEntry(flow.flow_id, flow.label, flow.proto_fine, normalize_flow(flow, cfg)))
    return entries


def build_database(flows: Sequence[FlowRecord], cfg: NormConfig, stats_include_self: bool = True) -> TrafficDatabase:
    """Normalize labeled flows and compute fine- and coarse-level statistics."""
    if not flows:
        raise InputValidationError("a traffic database needs at least one labeled flow")
    entries = _entries_from_flows(flows, cfg)
    stats = _stats_for_groups(_group_entries(entries), stats_include_self)
    db = TrafficDatabase(entries, stats, cfg, stats_include_self)
    logger.log_database_built(len(db), len(db.label_set), len(db.stats))
    return db


def _views_to_dict(views: NormalizedViews) -> dict:
    return {
        "views_present": [v.value for v in VIEW_ORDER if v in views.views_present],
        "payload_vec": views.payload_vec.tolist(),
        "len_time_vec": views.len_time_vec.tolist(),
        "iat_time_vec": views.iat_time_vec.tolist(),
        "len_freq_vec": views.len_freq_vec.tolist(),
        "iat_freq_vec": views.iat_freq_vec.tolist(),
    }


def _views_from_dict(raw: dict) -> NormalizedViews:
    return NormalizedViews(
        payload_vec=np.asarray(raw["payload_vec"], dtype=np.int64),
        len_time_vec=np.asarray(raw["len_time_vec"], dtype=np.float64),
        iat_time_vec=np.asarray(raw["iat_time_vec"], dtype=np.float64),
        len_freq_vec=np.asarray(raw["len_freq_vec"], dtype=np.float64),
        iat_freq_vec=np.asarray(raw["iat_freq_vec"], dtype=np.float64),
        views_present=frozenset(View(v) for v in raw["views_present"]),
    )


def save_snapshot(db: TrafficDatabase, path: Union[str, Path]):
    """Write the database as a single versioned, checksummed binary file."""
    body = {
        "norm_config": db.norm_config.model_dump(),
        "stats_include_self": db.stats_include_self,
        "entries": [
            {
                "flow_id": e.flow_id,
                "class_label": e.class_label,
                "proto_fine": e.proto_fine,
                "views": _views_to_dict(e.views),
            }
            for e in db.entries
        ],
        "stats": [
            {
                "class_label": s.class_label,
                "level": s.level.value,
                "protocol_tag": s.protocol_tag,
                "view": s.view.value,
                "mean": s.mean_dist,
                "std": s.std_dist,
                "count": s.sample_count,
            }
            for s in (db.stats[key] for key in sorted(db.stats, key=_stats_sort_key))
        ],
    }
    payload = zlib.compress(json.dumps(body, separators=(",", ":")).encode("utf-8"))
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(payload), hashlib.sha256(payload).digest())

    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    with tmp_path.open("wb") as handle:
        handle.write(header)
        handle.write(payload)
    os.replace(tmp_path, path)
    logger.info(f"Snapshot written to {path} ({len(db)} entries)")


def load_snapshot(path: Union[str, Path]) -> TrafficDatabase:
    path = Path(path)
    if not path.exists():
        raise SnapshotError(f"snapshot not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise SnapshotError(f"snapshot {path} is truncated (header incomplete)")
    magic, version, length, checksum = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{path} is not a traffic database snapshot")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot format version {version} is not supported (expected {SNAPSHOT_VERSION})")
    payload = data[_HEADER.size:]
    if len(payload) < length:
        raise SnapshotError(f"snapshot {path} is truncated ({len(payload)} of {length} body bytes)")
    payload = payload[:length]
    if hashlib.sha256(payload).digest() != checksum:
        raise SnapshotError(f"snapshot {path} failed checksum verification")

    try:
        body = json.loads(zlib.decompress(payload).decode("utf-8"))
        norm_config = NormConfig(**body["norm_config"])
        entries = [
            DbEntry(raw["flow_id"], raw["class_label"], raw["proto_fine"], _views_from_dict(raw["views"]))
            for raw in body["entries"]
        ]
        stats = {}
        for raw in body["stats"]:
            item = ClassProtocolStats(
                class_label=raw["class_label"],
                level=ProtocolLevel(raw["level"]),
                protocol_tag=raw["protocol_tag"],
                view=View(raw["view"]),
                mean_dist=raw["mean"],
                std_dist=raw["std"],
                sample_count=raw["count"],
            )
            stats[item.key] = item
        return TrafficDatabase(entries, stats, norm_config, body["stats_include_self"])
    except (KeyError, TypeError, ValueError, zlib.error) as e:
        raise SnapshotError(f"snapshot {path} has an invalid body: {e}") from e
