"""Deterministic synthetic open-set traffic for desk-scale experiments."""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from data_models import FlowRecord, StrongField, StrongSpan
from errors import ConfigError

SYNTHETIC_PREFIX = "synthetic:"

PAYLOAD_BYTES = 256
PACKETS_PER_FLOW = 64
MUTATION_RATE = 0.1
ENVELOPE_PERIOD = 4
ENVELOPE_BOOST = 80.0
LENGTH_NOISE = 20.0
IAT_JITTER = 0.1

# Identifier-like fields at the start of every payload
STRONG_LAYOUT = (
    (0, 8, StrongField.IP_ADDRESSES),
    (8, 12, StrongField.PORTS),
    (12, 16, StrongField.TCP_SEQ),
)

PROTOCOL_MIX = (("TCP|TLS1.2", 0.7), ("TCP|HTTP", 0.3))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 3
    flows: int = 100
    separation: float = 5.0
    novel: int = 2
    seed: int = 7

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError("at least one known class is required", field="classes")
        if self.flows < 2:
            raise ConfigError("each class needs at least two flows", field="flows")
        if self.separation < 0:
            raise ConfigError("separation must be >= 0", field="separation")
        if self.novel < 0:
            raise ConfigError("novel must be >= 0", field="novel")

    def class_label(self, index: int) -> str:
        return f"class{index}"

    @property
    def known_labels(self) -> List[str]:
        return [self.class_label(c) for c in range(self.classes)]

    @property
    def novel_labels(self) -> List[str]:
        return [self.class_label(c) for c in range(self.classes, self.classes + self.novel)]


def is_synthetic(dataset: str) -> bool:
    return dataset.startswith(SYNTHETIC_PREFIX)


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse ``synthetic:classes=3,flows=100,separation=5,novel=2,seed=7``; omitted keys keep defaults."""
    body = text[len(SYNTHETIC_PREFIX):] if is_synthetic(text) else text
    converters = {"classes": int, "flows": int, "separation": float, "novel": int, "seed": int}
    values = {}
    for part in filter(None, (p.strip() for p in body.split(","))):
        key, sep, raw = part.partition("=")
        key = key.strip()
        if not sep or key not in converters:
            raise ConfigError(f"unknown synthetic dataset setting {part!r}", field="dataset")
        try:
            values[key] = converters[key](raw.strip())
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {raw!r}", field="dataset") from None
    return SyntheticSpec(**values)


class _ClassProfile:
    """Payload motif, length envelope and timing rhythm of one class."""

    def __init__(self, spec: SyntheticSpec, index: int, template: np.ndarray):
        rng = np.random.default_rng([spec.seed, 1, index])
        weight = 1.0 - np.exp(-spec.separation)
        motif = rng.integers(0, 256, size=PAYLOAD_BYTES)
        from_motif = rng.random(PAYLOAD_BYTES) < weight
        self.motif = np.where(from_motif, motif, template)
        self.shortcut = rng.integers(0, 256, size=STRONG_LAYOUT[-1][1])

        self.length_mean = 400.0 + spec.separation * 150.0 * (index + 1)
        envelope = np.zeros(PACKETS_PER_FLOW)
        envelope[::ENVELOPE_PERIOD] = ENVELOPE_BOOST
        self.length_envelope = self.length_mean + envelope
        self.iat_base = 0.01 * (1.0 + spec.separation * (index + 1))


def _flow(profile: _ClassProfile, rng: np.random.Generator, flow_id: str, label: str) -> FlowRecord:
    payload = profile.motif.copy()
    mutate = rng.random(PAYLOAD_BYTES) < MUTATION_RATE
    payload[mutate] = rng.integers(0, 256, size=int(mutate.sum()))
    payload[:profile.shortcut.size] = profile.shortcut

    lengths = profile.length_envelope + rng.normal(0.0, LENGTH_NOISE, PACKETS_PER_FLOW)
    lengths = np.clip(np.rint(lengths), 0, None).astype(int)
    iats = profile.iat_base * (1.0 + IAT_JITTER * rng.standard_normal(PACKETS_PER_FLOW - 1))
    iats = np.round(np.clip(iats, 0.0, None), 6)

    protocols = [p for p, _ in PROTOCOL_MIX]
    weights = [w for _, w in PROTOCOL_MIX]
    proto = protocols[int(rng.choice(len(protocols), p=weights))]

    return FlowRecord(
        flow_id=flow_id,
        label=label,
        proto_fine=proto,
        payload=payload.astype(np.uint8).tobytes(),
        pkt_lengths=tuple(int(v) for v in lengths),
        iat_seconds=tuple(float(v) for v in iats),
        strong_spans=tuple(StrongSpan(start, end, kind) for start, end, kind in STRONG_LAYOUT),
    )


def _class_flows(spec: SyntheticSpec, index: int, template: np.ndarray) -> List[FlowRecord]:
    profile = _ClassProfile(spec, index, template)
    rng = np.random.default_rng([spec.seed, 2, index])
    label = spec.class_label(index)
    return [_flow(profile, rng, f"syn-{index:02d}-{i:04d}", label) for i in range(spec.flows)]


def generate_synthetic_openset(spec: SyntheticSpec) -> Tuple[List[FlowRecord], List[FlowRecord]]:
    """Labeled flows for the known classes and for the held-out novel classes.

    Larger ``separation`` moves class motifs away from a shared payload
    template and spreads length and timing levels apart; at 0 every class
    draws from the same distribution.
    """
    template = np.random.default_rng([spec.seed, 0]).integers(0, 256, size=PAYLOAD_BYTES)
    known: List[FlowRecord] = []
    for index in range(spec.classes):
        known.extend(_class_flows(spec, index, template))
    novel: List[FlowRecord] = []
    for index in range(spec.classes, spec.classes + spec.novel):
        novel.extend(_class_flows(spec, index, template))
    return known, novel
