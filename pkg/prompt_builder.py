"""Guidance prompt construction from a query flow and its retrieved evidence."""

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from config import DEFAULT_TEMPLATE_PATH
from data_models import (
    NOVEL_LABEL, VIEW_ORDER, EvidenceSet, FlowRecord, NormalizedViews, PromptSegment,
    RenderedPrompt, View
)
from errors import InternalConsistencyError, TemplateError
from traffic_db import TrafficDatabase
from utils.formatting import format_array, format_distance

NO_EVIDENCE_TEXT = (
    "There are no similar samples retrieved for this view; please focus on other available information."
)

SEGMENT_ORDER = ("task_instruction", "traffic_information", "retrieved_samples",
                 "decision_guidance", "output_format")

_SEGMENT_TITLES = {
    "task_instruction": "### Task Instruction",
    "traffic_information": "### Traffic Information",
    "retrieved_samples": "### Retrieved Samples",
    "decision_guidance": "### Decision Guidance",
    "output_format": "### Output Format",
}

_TRAFFIC_FIELDS = {
    View.PAYLOAD: "Payload bytes:",
    View.LENGTH: "Packet lengths:",
    View.TIME: "Inter-arrival times:",
}

_VIEW_TITLES = {
    View.PAYLOAD: "#### Payload view",
    View.LENGTH: "#### Length view",
    View.TIME: "#### Time view",
}

_MARKER = re.compile(r"^\[\[([A-Z_]+(?::[a-z]+)?)\]\][ \t]*$", re.MULTILINE)
_SLOT = re.compile(r"\{[A-Z_]+\}")
_REQUIRED_MARKERS = ("TASK", "NO_EVIDENCE", "GUIDANCE", "REASONING_ON", "REASONING_OFF")


@dataclass(frozen=True)
class PromptTemplate:
    task_instruction: str
    no_evidence_placeholder: str
    decision_guidance: Optional[str]
    reasoning_suffix_on: str
    reasoning_suffix_off: str
    evidence_notes: Dict[View, str] = field(default_factory=dict)


def parse_template(text: str, source: str = "<template>") -> PromptTemplate:
    """Split marker-delimited template text into a PromptTemplate."""
    matches = list(_MARKER.finditer(text))
    blocks: Dict[str, str] = {}
    for index, match in enumerate(matches):
        name = match.group(1)
        end = matches[index + 1].start() if index + 1 < len(matches) else len(text)
        if name in blocks:
            raise TemplateError(f"{source}: marker [[{name}]] appears more than once")
        blocks[name] = text[match.end():end].strip()

    notes: Dict[View, str] = {}
    for name in blocks:
        if name.startswith("NOTE:"):
            try:
                notes[View(name.split(":", 1)[1])] = blocks[name]
            except ValueError:
                raise TemplateError(f"{source}: unknown view in marker [[{name}]]") from None
        elif name not in _REQUIRED_MARKERS:
            raise TemplateError(f"{source}: unknown marker [[{name}]]")

    missing = [name for name in _REQUIRED_MARKERS if not blocks.get(name)]
    if missing:
        raise TemplateError(f"{source}: missing or empty markers: {', '.join(missing)}")

    return PromptTemplate(
        task_instruction=blocks["TASK"],
        no_evidence_placeholder=blocks["NO_EVIDENCE"],
        decision_guidance=blocks["GUIDANCE"],
        reasoning_suffix_on=blocks["REASONING_ON"],
        reasoning_suffix_off=blocks["REASONING_OFF"],
        evidence_notes=notes,
    )


def load_template(path: Union[str, Path, None] = None) -> PromptTemplate:
    path = Path(path) if path is not None else DEFAULT_TEMPLATE_PATH
    if not path.exists():
        raise TemplateError(f"template file not found: {path}")
    return parse_template(path.read_text(encoding="utf-8"), source=str(path))


def ablate_template(tmpl: PromptTemplate, mode: str = "full") -> PromptTemplate:
    """``no_guidance`` drops evidence notes and decision guidance; ``full`` is the identity."""
    if mode == "full":
        return tmpl
    if mode == "no_guidance":
        return replace(tmpl, evidence_notes={}, decision_guidance=None)
    raise TemplateError(f"unknown ablation mode {mode!r}")


def _fill(text: str, label_set: str) -> str:
    filled = text.replace("{LABEL_SET}", label_set)
    leftover = _SLOT.search(filled)
    if leftover:
        raise TemplateError(f"unfilled template slot {leftover.group(0)}")
    return filled


def _traffic_information(flow: FlowRecord, q: NormalizedViews, display_cap: int) -> str:
    lines = [f"Protocol: {flow.proto_fine}"]
    for view in VIEW_ORDER:
        label = _TRAFFIC_FIELDS[view]
        if view in q.views_present:
            lines.append(f"{label} {format_array(q.display_vector(view), display_cap)}")
        else:
            lines.append(label)
    return "\n".join(lines)


def _retrieved_samples(ev: EvidenceSet, db: TrafficDatabase, tmpl: PromptTemplate,
                       label_set: str, display_cap: int) -> str:
    blocks: List[str] = []
    for view in VIEW_ORDER:
        if view not in db.views_available:
            continue
        kept = ev.kept(view)
        lines = [_VIEW_TITLES[view]]
        if not kept:
            lines.append(tmpl.no_evidence_placeholder)
        else:
            note = tmpl.evidence_notes.get(view)
            if note:
                lines.append(_fill(note, label_set))
            for index, item in enumerate(kept, start=1):
                entry = db.get_entry(item.flow_id)
                values = format_array(entry.views.display_vector(view), display_cap)
                lines.append(
                    f"Sample {index}: label={item.class_label}, "
                    f"distance={format_distance(item.distance)}, values={values}"
                )
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def _check_evidence(ev: EvidenceSet, db: TrafficDatabase):
    labels = set(db.label_set)
    for view in VIEW_ORDER:
        for item in ev.per_view.get(view, ()):
            if item.class_label not in labels:
                raise InternalConsistencyError(
                    f"evidence label {item.class_label!r} is not in the database label set"
                )
            if db.get_entry(item.flow_id) is None:
                raise InternalConsistencyError(f"evidence references unknown flow {item.flow_id!r}")


def label_space(db: TrafficDatabase) -> Tuple[str, ...]:
    """LABEL_SET followed by the novel label exactly once."""
    return tuple(label for label in db.label_set if label != NOVEL_LABEL) + (NOVEL_LABEL,)


def build_prompt(flow: FlowRecord, q: NormalizedViews, ev: EvidenceSet, db: TrafficDatabase,
                 reasoning: bool, tmpl: PromptTemplate, display_cap: int = 64) -> RenderedPrompt:
    """Render the guidance prompt with its segment byte ranges."""
    _check_evidence(ev, db)
    space = label_space(db)
    label_set = ", ".join(space)

    bodies = {
        "task_instruction": _fill(tmpl.task_instruction, label_set),
        "traffic_information": _traffic_information(flow, q, display_cap),
        "retrieved_samples": _retrieved_samples(ev, db, tmpl, label_set, display_cap),
        "decision_guidance": _fill(tmpl.decision_guidance, label_set) if tmpl.decision_guidance else None,
        "output_format": _fill(tmpl.reasoning_suffix_on if reasoning else tmpl.reasoning_suffix_off, label_set),
    }

    parts: List[str] = []
    segments: List[PromptSegment] = []
    offset = 0
    for name in SEGMENT_ORDER:
        body = bodies[name]
        if body is None:
            continue
        block = _SEGMENT_TITLES[name] + ("\n" + body if body else "")
        if parts:
            offset += len("\n\n")
        size = len(block.encode("utf-8"))
        segments.append(PromptSegment(name, offset, offset + size))
        offset += size
        parts.append(block)

    return RenderedPrompt(
        text="\n\n".join(parts) + "\n",
        segments=tuple(segments),
        label_space=space,
        evidence=ev,
        reasoning=reasoning,
    )


class PromptBuilder:
    """Template-bound renderer used by the classification flow."""

    def __init__(self, template_path: Union[str, Path, None] = None, display_cap: int = 64,
                 ablate_guidance: bool = False):
        self.template_path = template_path
        self.display_cap = display_cap
        self.ablate_guidance = ablate_guidance
        self._template: Optional[PromptTemplate] = None

    @property
    def template(self) -> PromptTemplate:
        if self._template is None:
            tmpl = load_template(self.template_path)
            self._template = ablate_template(tmpl, "no_guidance" if self.ablate_guidance else "full")
        return self._template

    def build(self, flow: FlowRecord, q: NormalizedViews, ev: EvidenceSet, db: TrafficDatabase,
              reasoning: bool = False) -> RenderedPrompt:
        return build_prompt(flow, q, ev, db, reasoning, self.template, self.display_cap)


# Global prompt builder with the shipped template
prompt_builder = PromptBuilder()
