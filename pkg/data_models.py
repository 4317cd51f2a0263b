"""Data models for the open-set traffic identification engine."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from errors import ConfigError

NOVEL_LABEL = "novel"


class View(Enum):
    """Feature perspectives of a flow."""
    PAYLOAD = "payload"
    LENGTH = "length"
    TIME = "time"


# Canonical iteration order for views everywhere (retrieval, prompts, digests)
VIEW_ORDER: Tuple[View, ...] = (View.PAYLOAD, View.LENGTH, View.TIME)


class StrongField(Enum):
    """Identifier-like fields replaced before database construction."""
    IP_ADDRESSES = "ip_addresses"
    PORTS = "ports"
    TCP_SEQ = "tcp_seq"
    TLS_SNI = "tls_sni"


class ProtocolLevel(Enum):
    FINE = "fine"
    COARSE = "coarse"


class Ablation(Enum):
    """Pipeline variants for ablation runs."""
    FULL = "full"
    NO_CER = "no_cer"   # no retrieval at all
    NO_TAP = "no_tap"   # keep every top-k item
    NO_GP = "no_gp"     # task instruction only, no notes or decision guidance


def coarse_protocol(proto_fine: str) -> str:
    """First pipe-delimited component of a fine protocol tag."""
    return proto_fine.split("|", 1)[0]


@dataclass(frozen=True)
class StrongSpan:
    """Byte range [start, end) of a strong-feature field inside the payload."""
    start: int
    end: int
    kind: StrongField


@dataclass(frozen=True)
class FlowRecord:
    """A labeled or unlabeled flow as read from the record format."""
    flow_id: str
    label: Optional[str]
    proto_fine: str
    payload: bytes
    pkt_lengths: Tuple[int, ...]
    iat_seconds: Tuple[float, ...]
    strong_spans: Tuple[StrongSpan, ...] = ()

    @property
    def proto_coarse(self) -> str:
        return coarse_protocol(self.proto_fine)


@dataclass(frozen=True)
class RandomizationPolicy:
    seed: int = 0
    fields_randomized: FrozenSet[StrongField] = frozenset(StrongField)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}",
                              field="randomize_seed")

    @classmethod
    def disabled(cls) -> "RandomizationPolicy":
        return cls(seed=0, fields_randomized=frozenset())

    @property
    def enabled(self) -> bool:
        return bool(self.fields_randomized)


@dataclass(frozen=True, eq=False)
class NormalizedViews:
    """Per-flow normalized vectors for every view.

    ``payload_vec``, ``len_freq_vec`` and ``iat_freq_vec`` are what retrieval
    compares; the time-domain vectors are kept for prompt display.
    """
    payload_vec: np.ndarray
    len_time_vec: np.ndarray
    iat_time_vec: np.ndarray
    len_freq_vec: np.ndarray
    iat_freq_vec: np.ndarray
    views_present: FrozenSet[View]

    def __post_init__(self):
        for name in ("payload_vec", "len_time_vec", "iat_time_vec", "len_freq_vec", "iat_freq_vec"):
            getattr(self, name).setflags(write=False)

    def retrieval_vector(self, view: View) -> np.ndarray:
        if view is View.PAYLOAD:
            return self.payload_vec
        if view is View.LENGTH:
            return self.len_freq_vec
        return self.iat_freq_vec

    def display_vector(self, view: View) -> np.ndarray:
        if view is View.PAYLOAD:
            return self.payload_vec
        if view is View.LENGTH:
            return self.len_time_vec
        return self.iat_time_vec

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NormalizedViews):
            return NotImplemented
        return (
            self.views_present == other.views_present
            and np.array_equal(self.payload_vec, other.payload_vec)
            and np.array_equal(self.len_time_vec, other.len_time_vec)
            and np.array_equal(self.iat_time_vec, other.iat_time_vec)
            and np.array_equal(self.len_freq_vec, other.len_freq_vec)
            and np.array_equal(self.iat_freq_vec, other.iat_freq_vec)
        )

    __hash__ = None


@dataclass(frozen=True)
class DbEntry:
    """One stored known-malicious flow."""
    flow_id: str
    class_label: str
    proto_fine: str
    views: NormalizedViews

    @property
    def proto_coarse(self) -> str:
        return coarse_protocol(self.proto_fine)

    def protocol_tag(self, level: ProtocolLevel) -> str:
        return self.proto_fine if level is ProtocolLevel.FINE else self.proto_coarse


# (class label, protocol level, protocol tag, view)
StatsKey = Tuple[str, ProtocolLevel, str, View]


@dataclass(frozen=True)
class ClassProtocolStats:
    """Intra-class distance statistics for one class/protocol/view group."""
    class_label: str
    level: ProtocolLevel
    protocol_tag: str
    view: View
    mean_dist: float
    std_dist: float
    sample_count: int

    @property
    def key(self) -> StatsKey:
        return (self.class_label, self.level, self.protocol_tag, self.view)

    def threshold(self, alpha: float) -> float:
        return self.mean_dist + alpha * self.std_dist


@dataclass(frozen=True)
class EvidenceItem:
    """A retrieved neighbour with its pruning outcome."""
    flow_id: str
    class_label: str
    view: View
    distance: float
    protocol_level: ProtocolLevel
    threshold: float = float("inf")
    kept: bool = True


@dataclass(frozen=True)
class EvidenceSet:
    per_view: Dict[View, Tuple[EvidenceItem, ...]]
    pool: Tuple[EvidenceItem, ...]

    @classmethod
    def from_per_view(cls, per_view: Dict[View, Tuple[EvidenceItem, ...]]) -> "EvidenceSet":
        full = {view: tuple(per_view.get(view, ())) for view in VIEW_ORDER}
        pool = tuple(item for view in VIEW_ORDER for item in full[view] if item.kept)
        return cls(per_view=full, pool=pool)

    @classmethod
    def empty(cls) -> "EvidenceSet":
        return cls.from_per_view({})

    def kept(self, view: View) -> Tuple[EvidenceItem, ...]:
        return tuple(item for item in self.per_view.get(view, ()) if item.kept)

    def retrieved_counts(self) -> Dict[str, int]:
        return {view.value: len(self.per_view.get(view, ())) for view in VIEW_ORDER}


@dataclass(frozen=True)
class PromptSegment:
    """Byte range of one named prompt segment within the rendered text."""
    name: str
    start: int
    end: int


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    segments: Tuple[PromptSegment, ...]
    label_space: Tuple[str, ...]
    evidence: EvidenceSet
    reasoning: bool = False

    def segment_names(self) -> List[str]:
        return [segment.name for segment in self.segments]

    def segment_text(self, name: str) -> Optional[str]:
        encoded = self.text.encode("utf-8")
        for segment in self.segments:
            if segment.name == name:
                return encoded[segment.start:segment.end].decode("utf-8")
        return None


@dataclass(frozen=True)
class Provenance:
    prompt_digest: str
    evidence_digest: str
    backend: str
    raw_response: str


@dataclass(frozen=True)
class Verdict:
    """Final label (always in the label space) with optional reasoning."""
    label: str
    reasoning: Optional[str] = None
    provenance: Optional[Provenance] = None


@dataclass
class ClassificationResult:
    """Outcome of classifying one flow, successful or not."""
    flow_id: str
    true_label: Optional[str]
    verdict: Optional[Verdict] = None
    evidence: Optional[EvidenceSet] = None
    prompt_text: Optional[str] = None
    error: Optional[str] = None

    @property
    def predicted(self) -> Optional[str]:
        return self.verdict.label if self.verdict else None

    @property
    def failed(self) -> bool:
        return self.verdict is None


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    """Known-class and (optionally) open-set metrics for one run."""
    mode: str
    macro_pre: float
    macro_rcl: float
    macro_f1: float
    per_class: Dict[str, ClassMetrics] = field(default_factory=dict)
    confusion_labels: List[str] = field(default_factory=list)
    confusion: List[List[int]] = field(default_factory=list)
    pre_k: Optional[float] = None
    rcl_k: Optional[float] = None
    pre_n: Optional[float] = None
    rcl_n: Optional[float] = None
    aks: Optional[float] = None
    aus: Optional[float] = None
    na: Optional[float] = None
    sample_count: int = 0
    excluded: int = 0

    def scalar_metrics(self) -> Dict[str, float]:
        """Headline metrics present in this report, in display order."""
        names = ["macro_pre", "macro_rcl", "macro_f1", "pre_k", "rcl_k", "pre_n", "rcl_n", "aks", "aus", "na"]
        return {name: getattr(self, name) for name in names if getattr(self, name) is not None}


@dataclass(frozen=True)
class SplitSpec:
    db_fraction: float = 0.8
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    stratify_by: Tuple[str, str] = ("class", "coarse_protocol")

    def __post_init__(self):
        if not 0.0 < self.db_fraction < 1.0:
            raise ConfigError(f"db_fraction must lie in (0, 1), got {self.db_fraction}",
                              field="db_fraction")
        if not self.seeds:
            raise ConfigError("at least one seed is required", field="seeds")
