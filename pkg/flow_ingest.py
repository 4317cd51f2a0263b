"""Flow-record ingestion: parsing, validation and strong-feature randomization."""

import hashlib
import json
from pathlib import Path
from typing import Iterable, List, Optional, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from data_models import FlowRecord, RandomizationPolicy, StrongField, StrongSpan
from errors import FlowParseError, FlowValidationError
from utils.logger import logger


class FlowRecordLine(BaseModel):
    """Schema of one line of the record format."""

    model_config = ConfigDict(extra="ignore")

    flow_id: str
    label: Optional[str] = None
    proto_fine: str
    payload_hex: str
    pkt_lengths: List[int]
    iat_seconds: List[float]
    strong_spans: Optional[List[Tuple[int, int, str]]] = None

    @field_validator("flow_id")
    @classmethod
    def _flow_id_non_empty(cls, value: str) -> str:
        if not value:
            raise ValueError("must be non-empty")
        return value

    @field_validator("label")
    @classmethod
    def _label_non_empty(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and not value.strip():
            raise ValueError("must be null or a non-empty class label")
        return value

    @field_validator("proto_fine")
    @classmethod
    def _proto_non_empty(cls, value: str) -> str:
        if not value or not value.split("|", 1)[0]:
            raise ValueError("must start with a transport-level tag")
        return value

    @field_validator("payload_hex")
    @classmethod
    def _payload_is_hex(cls, value: str) -> str:
        if value != value.lower():
            raise ValueError("must be lowercase hex")
        try:
            bytes.fromhex(value)
        except ValueError as e:
            raise ValueError(f"not a hex string ({e})") from e
        return value

    @field_validator("pkt_lengths")
    @classmethod
    def _lengths_non_negative(cls, value: List[int]) -> List[int]:
        if any(length < 0 for length in value):
            raise ValueError("packet lengths must be >= 0")
        return value

    @field_validator("iat_seconds")
    @classmethod
    def _iat_non_negative(cls, value: List[float]) -> List[float]:
        if any(not np.isfinite(iat) or iat < 0 for iat in value):
            raise ValueError("inter-arrival times must be finite and >= 0")
        return value

    @field_validator("strong_spans")
    @classmethod
    def _spans_well_formed(cls, value):
        if value is None:
            return value
        kinds = {f.value for f in StrongField}
        for start, end, kind in value:
            if start < 0 or end < start:
                raise ValueError(f"span [{start}, {end}] must satisfy 0 <= start <= end")
            if kind not in kinds:
                raise ValueError(f"unknown strong-feature kind {kind!r}")
        return value

    @model_validator(mode="after")
    def _iat_count_matches(self) -> "FlowRecordLine":
        expected = max(0, len(self.pkt_lengths) - 1)
        if len(self.iat_seconds) != expected:
            raise ValueError(
                f"iat_seconds: expected {expected} inter-arrival times for "
                f"{len(self.pkt_lengths)} packets, got {len(self.iat_seconds)}"
            )
        return self

    def to_record(self) -> FlowRecord:
        spans = tuple(StrongSpan(start, end, StrongField(kind)) for start, end, kind in (self.strong_spans or ()))
        return FlowRecord(
            flow_id=self.flow_id,
            label=self.label,
            proto_fine=self.proto_fine,
            payload=bytes.fromhex(self.payload_hex),
            pkt_lengths=tuple(self.pkt_lengths),
            iat_seconds=tuple(float(iat) for iat in self.iat_seconds),
            strong_spans=spans,
        )


def _error_field(error: ValidationError) -> Tuple[str, str]:
    first = error.errors()[0]
    loc = first.get("loc") or ()
    message = first.get("msg", str(error))
    if loc:
        return str(loc[0]), message
    # model-level validators prefix their message with the offending field
    if ": " in message:
        prefix, _, rest = message.partition(": ")
        field = prefix.replace("Value error, ", "")
        return field, rest
    return "record", message


def parse_record_line(line: str, line_number: int = 1) -> FlowRecord:
    """Parse and validate one record line."""
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as e:
        raise FlowParseError(f"malformed record ({e.msg} at column {e.colno})", line_number) from e
    if not isinstance(raw, dict):
        raise FlowParseError("record must be a JSON object", line_number)
    try:
        return FlowRecordLine.model_validate(raw).to_record()
    except ValidationError as e:
        field, message = _error_field(e)
        raise FlowValidationError(message, field=field, line_number=line_number) from e


def serialize_record(flow: FlowRecord) -> str:
    """Canonical single-line form of a flow record."""
    raw = {
        "flow_id": flow.flow_id,
        "label": flow.label,
        "proto_fine": flow.proto_fine,
        "payload_hex": flow.payload.hex(),
        "pkt_lengths": list(flow.pkt_lengths),
        "iat_seconds": list(flow.iat_seconds),
    }
    if flow.strong_spans:
        raw["strong_spans"] = [[s.start, s.end, s.kind.value] for s in flow.strong_spans]
    return json.dumps(raw, separators=(",", ":"))


def _span_rng(policy: RandomizationPolicy, flow_id: str, span: StrongSpan) -> np.random.Generator:
    tag = f"{flow_id}:{span.start}:{span.end}:{span.kind.value}".encode("utf-8")
    entropy = int.from_bytes(hashlib.blake2b(tag, digest_size=8).digest(), "big")
    return np.random.default_rng([policy.seed, entropy])


def randomize_strong_features(flow: FlowRecord, policy: RandomizationPolicy) -> FlowRecord:
    """Replace the payload bytes of flagged strong-feature spans with seeded random bytes.

    Payload length, sequences, label and protocol tags are left as they are.
    Spans past the end of the payload are skipped; overlapping spans are
    applied in record order.
    """
    if not policy.enabled or not flow.strong_spans or not flow.payload:
        return flow

    payload = bytearray(flow.payload)
    touched = False
    for span in flow.strong_spans:
        if span.kind not in policy.fields_randomized:
            continue
        end = min(span.end, len(payload))
        if span.start >= end:
            continue
        rng = _span_rng(policy, flow.flow_id, span)
        payload[span.start:end] = rng.integers(0, 256, size=end - span.start, dtype=np.uint8).tobytes()
        touched = True

    if not touched:
        return flow
    return FlowRecord(
        flow_id=flow.flow_id,
        label=flow.label,
        proto_fine=flow.proto_fine,
        payload=bytes(payload),
        pkt_lengths=flow.pkt_lengths,
        iat_seconds=flow.iat_seconds,
        strong_spans=flow.strong_spans,
    )


def _decode_line(line: Union[str, bytes], line_number: int) -> str:
    if isinstance(line, str):
        return line
    try:
        return line.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FlowParseError(f"invalid UTF-8 at byte {e.start}", line_number) from e


def parse_records(lines: Iterable[Union[str, bytes]], policy: RandomizationPolicy) -> List[FlowRecord]:
    """Parse record lines, enforcing unique flow ids and applying randomization.

    Lines may be text or raw bytes; bytes are decoded as UTF-8 one line at a time.
    """
    flows: List[FlowRecord] = []
    seen: Set[str] = set()
    for line_number, raw_line in enumerate(lines, start=1):
        line = _decode_line(raw_line, line_number)
        if not line.strip():
            continue
        flow = parse_record_line(line, line_number)
        if flow.flow_id in seen:
            raise FlowValidationError(f"duplicate flow_id {flow.flow_id!r}", field="flow_id",
                                      line_number=line_number)
        seen.add(flow.flow_id)
        flows.append(randomize_strong_features(flow, policy))
    return flows


def load_dataset(path: Union[str, Path], policy: RandomizationPolicy) -> List[FlowRecord]:
    """Load a line-delimited record file, one FlowRecord per non-blank line, in order."""
    path = Path(path)
    if not path.exists():
        raise FlowValidationError(f"dataset not found: {path}", field="path")
    with path.open("rb") as handle:
        flows = parse_records(handle, policy)
    logger.log_dataset_loaded(str(path), len(flows), policy.enabled)
    return flows


def write_dataset(path: Union[str, Path], flows: Iterable[FlowRecord]) -> int:
    """Write flows in the canonical record format; returns the number written."""
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for flow in flows:
            handle.write(serialize_record(flow) + "\n")
            count += 1
    return count
