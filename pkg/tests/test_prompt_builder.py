"""Tests for prompt templates and rendering, pinned by golden files."""

from pathlib import Path

import numpy as np
import pytest

from config import NormConfig
from data_models import (
    DbEntry, EvidenceItem, EvidenceSet, FlowRecord, NormalizedViews, ProtocolLevel, View
)
from errors import InternalConsistencyError, TemplateError
from prompt_builder import (
    NO_EVIDENCE_TEXT, PromptBuilder, ablate_template, build_prompt, load_template, parse_template
)
from traffic_db import TrafficDatabase

GOLDEN = Path(__file__).parent / "golden"
ALL_VIEWS = frozenset(View)


def views(payload, lengths, iats, present=ALL_VIEWS) -> NormalizedViews:
    return NormalizedViews(
        payload_vec=np.asarray(payload, dtype=np.int64),
        len_time_vec=np.asarray(lengths, dtype=np.float64),
        iat_time_vec=np.asarray(iats, dtype=np.float64),
        len_freq_vec=np.zeros(2),
        iat_freq_vec=np.zeros(2),
        views_present=present,
    )


@pytest.fixture
def db() -> TrafficDatabase:
    entries = [
        DbEntry("k1", "Neris", "TCP|TLS1.2", views([22, 3, 1, 0], [60, 1500, 40, 0], [0.01, 0.25, 0, 0])),
        DbEntry("k2", "Virut", "TCP|TLS1.2", views([22, 3, 0, 0], [60, 1400, 0, 0], [0.02, 0.5, 0, 0])),
        DbEntry("k3", "Neris", "TCP|TLS1.2",
                views([23, 3, 1, 1], [64, 1500, 52, 1500], [0.015, 0.2, 0.125, 0])),
    ]
    return TrafficDatabase(entries, {}, NormConfig(L_pay=4, L_len=4, L_time=4, W_seg=2))


@pytest.fixture
def template():
    return load_template()


def query_flow(proto="TCP|TLS1.2") -> FlowRecord:
    return FlowRecord("q1", None, proto, b"\x16\x03\x01", (60, 1500, 40), (0.01, 0.3))


def query_views() -> NormalizedViews:
    return views([22, 3, 1, 0], [60, 1500, 40, 0], [0.01, 0.3, 0, 0])


def item(flow_id, label, view, distance, kept=True, level=ProtocolLevel.FINE):
    return EvidenceItem(flow_id, label, view, distance, level, threshold=0.4, kept=kept)


def full_evidence() -> EvidenceSet:
    return EvidenceSet.from_per_view({
        View.PAYLOAD: (item("k1", "Neris", View.PAYLOAD, 0.0), item("k2", "Virut", View.PAYLOAD, 0.25),
                       item("k3", "Neris", View.PAYLOAD, 0.5, kept=False)),
        View.LENGTH: (item("k1", "Neris", View.LENGTH, 0.0), item("k3", "Neris", View.LENGTH, 1234.5678)),
        View.TIME: (item("k1", "Neris", View.TIME, 0.05),),
    })


class TestGoldenPrompts:
    """Rendered prompts must match the checked-in golden files byte for byte."""

    def test_full_evidence(self, db, template):
        """Every view has kept evidence."""
        prompt = build_prompt(query_flow(), query_views(), full_evidence(), db, False, template)
        assert prompt.text == (GOLDEN / "full_evidence.txt").read_text(encoding="utf-8")

    def test_mixed_availability(self, db, template):
        """No payload evidence, unequal length and time evidence, reasoning on."""
        flow = FlowRecord("q2", None, "TCP|TLS1.3", b"", (64, 1500, 52, 1500), (0.015, 0.2, 0.125))
        q = views([0, 0, 0, 0], [64, 1500, 52, 1500], [0.015, 0.2, 0.125, 0],
                  present=frozenset({View.LENGTH, View.TIME}))
        coarse = ProtocolLevel.COARSE
        evidence = EvidenceSet.from_per_view({
            View.LENGTH: (item("k3", "Neris", View.LENGTH, 0.0, level=coarse),
                          item("k2", "Virut", View.LENGTH, 98.7654, level=coarse)),
            View.TIME: (item("k3", "Neris", View.TIME, 0.0, level=coarse),
                        item("k2", "Virut", View.TIME, 0.3, kept=False, level=coarse)),
        })
        prompt = build_prompt(flow, q, evidence, db, True, template)
        assert prompt.text == (GOLDEN / "mixed_availability.txt").read_text(encoding="utf-8")

    def test_all_empty(self, db, template):
        """Empty evidence renders the placeholder in every view; arrays past the cap are elided."""
        prompt = build_prompt(query_flow("UDP|DNS"), query_views(), EvidenceSet.empty(), db, False, template,
                              display_cap=2)
        assert prompt.text == (GOLDEN / "all_empty.txt").read_text(encoding="utf-8")
        assert prompt.text.count(NO_EVIDENCE_TEXT) == 3


class TestBuildPrompt:
    """Test cases for prompt structure."""

    def test_placeholder_text(self, template):
        """The shipped placeholder is the exact sentence."""
        assert template.no_evidence_placeholder == (
            "There are no similar samples retrieved for this view; please focus on other available information."
        )

    def test_segments_in_order(self, db, template):
        """Segments appear in their canonical order and cover their headers."""
        prompt = build_prompt(query_flow(), query_views(), full_evidence(), db, False, template)
        assert prompt.segment_names() == [
            "task_instruction", "traffic_information", "retrieved_samples", "decision_guidance", "output_format",
        ]
        assert prompt.segment_text("traffic_information").startswith("### Traffic Information\n")
        assert prompt.segment_text("decision_guidance").endswith("Neris, Virut, novel.")

    def test_label_space(self, db, template):
        """The answer space is the label set with novel last, once."""
        prompt = build_prompt(query_flow(), query_views(), full_evidence(), db, False, template)
        assert prompt.label_space == ("Neris", "Virut", "novel")

    def test_deterministic(self, db, template):
        """Rendering twice yields identical text."""
        first = build_prompt(query_flow(), query_views(), full_evidence(), db, True, template)
        second = build_prompt(query_flow(), query_views(), full_evidence(), db, True, template)
        assert first.text == second.text

    def test_view_missing_from_db_is_omitted(self, template):
        """Views no database entry has get neither samples nor a placeholder."""
        entry = DbEntry("k1", "Neris", "TCP", views([1, 2], [0, 0], [0, 0], present=frozenset({View.PAYLOAD})))
        db = TrafficDatabase([entry], {}, NormConfig())
        prompt = build_prompt(query_flow(), query_views(), EvidenceSet.empty(), db, False, template)
        assert "#### Payload view" in prompt.text
        assert "#### Length view" not in prompt.text
        assert prompt.text.count(NO_EVIDENCE_TEXT) == 1

    def test_unknown_label_in_evidence(self, db, template):
        """Evidence naming a class outside the database is inconsistent."""
        evidence = EvidenceSet.from_per_view({View.PAYLOAD: (item("k1", "Zeus", View.PAYLOAD, 0.0),)})
        with pytest.raises(InternalConsistencyError):
            build_prompt(query_flow(), query_views(), evidence, db, False, template)

    def test_evidence_labels_within_label_space(self, db, template):
        """Every label shown in the samples belongs to the answer space."""
        prompt = build_prompt(query_flow(), query_views(), full_evidence(), db, False, template)
        samples = prompt.segment_text("retrieved_samples")
        shown = {line.split("label=")[1].split(",")[0] for line in samples.splitlines() if "label=" in line}
        assert shown <= set(prompt.label_space)


class TestAblation:
    """Test cases for the guidance ablation."""

    def test_full_is_identity(self, template):
        """Full mode returns the template unchanged."""
        assert ablate_template(template, "full") is template

    def test_no_guidance(self, db, template):
        """No decision guidance and no notes, but traffic data and evidence remain."""
        ablated = ablate_template(template, "no_guidance")
        prompt = build_prompt(query_flow(), query_views(), full_evidence(), db, False, ablated)

        assert "decision_guidance" not in prompt.segment_names()
        assert "### Traffic Information" in prompt.text
        assert "**Note**" not in prompt.text
        assert "Sample 1: label=Neris" in prompt.text
        assert prompt.segment_text("task_instruction") == \
            build_prompt(query_flow(), query_views(), full_evidence(), db, False, template).segment_text(
                "task_instruction")

    def test_builder_applies_ablation(self, db):
        """A builder created for the ablation renders without guidance."""
        prompt = PromptBuilder(ablate_guidance=True).build(query_flow(), query_views(), full_evidence(), db)
        assert "### Decision Guidance" not in prompt.text
        assert prompt.text.rstrip().endswith("ANSWER: <label>")


class TestTemplateLoading:
    """Test cases for the marker-delimited template format."""

    MINIMAL = (
        "[[TASK]]\nClassify into {LABEL_SET}.\n"
        "[[NO_EVIDENCE]]\nnothing\n"
        "[[GUIDANCE]]\nPick one of {LABEL_SET}.\n"
        "[[REASONING_ON]]\nthink\nANSWER: <label>\n"
        "[[REASONING_OFF]]\nANSWER: <label>\n"
    )

    def test_minimal_template(self):
        """Notes are optional."""
        tmpl = parse_template(self.MINIMAL)
        assert tmpl.evidence_notes == {}
        assert tmpl.task_instruction == "Classify into {LABEL_SET}."

    def test_missing_marker(self):
        """Required markers must be present."""
        with pytest.raises(TemplateError, match="GUIDANCE"):
            parse_template(self.MINIMAL.replace("[[GUIDANCE]]", "[[NOTE:length]]"))

    def test_unknown_marker(self):
        """Unrecognised markers are rejected."""
        with pytest.raises(TemplateError):
            parse_template(self.MINIMAL + "[[EXTRA]]\nx\n")

    def test_unfilled_slot(self, db):
        """Slots other than LABEL_SET cannot be filled and fail rendering."""
        tmpl = parse_template(self.MINIMAL.replace("Classify into {LABEL_SET}.", "Act as {ROLE}."))
        with pytest.raises(TemplateError, match="ROLE"):
            build_prompt(query_flow(), query_views(), EvidenceSet.empty(), db, False, tmpl)

    def test_missing_file(self, tmp_path):
        """A template path that does not exist is an error."""
        with pytest.raises(TemplateError):
            load_template(tmp_path / "missing.txt")


if __name__ == '__main__':
    pytest.main([__file__])
