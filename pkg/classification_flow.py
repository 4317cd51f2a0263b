"""Per-flow classification: normalize, retrieve, prune, prompt, generate, parse."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from config import EngineConfig
from data_models import Ablation, ClassificationResult, EvidenceSet, FlowRecord, Provenance
from errors import VerdictParseError
from feature_norm import normalize_flow
from llm_client import LLMClient, parse_verdict
from prompt_builder import PromptBuilder
from retrieval import evidence_digest, retrieve
from traffic_db import TrafficDatabase
from utils.formatting import sha256_text
from utils.logger import logger


class TrafficClassifier:
    """Runs the retrieval-augmented pipeline for flows against one database."""

    def __init__(self, db: TrafficDatabase, cfg: EngineConfig, ablation: Ablation = Ablation.FULL,
                 client: Optional[LLMClient] = None, keep_prompts: bool = False):
        self.db = db
        self.cfg = cfg
        self.ablation = ablation
        self.client = client or LLMClient(cfg.backend)
        self.keep_prompts = keep_prompts
        self.builder = PromptBuilder(
            template_path=cfg.template_path,
            display_cap=cfg.display_cap,
            ablate_guidance=ablation is Ablation.NO_GP,
        )

    def gather_evidence(self, flow: FlowRecord, views=None) -> EvidenceSet:
        """Evidence for ``flow`` under this classifier's ablation."""
        if self.ablation is Ablation.NO_CER:
            return EvidenceSet.empty()
        if views is None:
            views = normalize_flow(flow, self.db.norm_config)
        return retrieve(self.db, views, flow.proto_fine, self.cfg.retrieval,
                        prune=self.ablation is not Ablation.NO_TAP, flow_id=flow.flow_id)

    def classify(self, flow: FlowRecord) -> ClassificationResult:
        """Classify one flow. Unparseable backend output is recorded, not raised."""
        views = normalize_flow(flow, self.db.norm_config)
        evidence = self.gather_evidence(flow, views)
        prompt = self.builder.build(flow, views, evidence, self.db, self.cfg.reasoning)
        raw = self.client.generate(prompt)

        result = ClassificationResult(
            flow_id=flow.flow_id,
            true_label=flow.label,
            evidence=evidence,
            prompt_text=prompt.text if self.keep_prompts else None,
        )
        try:
            verdict = parse_verdict(raw, prompt.label_space, self.cfg.reasoning)
        except VerdictParseError as e:
            logger.log_parse_failure(flow.flow_id, str(e))
            result.error = str(e)
            return result

        result.verdict = replace(verdict, provenance=Provenance(
            prompt_digest=sha256_text(prompt.text),
            evidence_digest=evidence_digest(evidence),
            backend=self.client.identity,
            raw_response=raw,
        ))
        return result

    def classify_batch(self, flows: Iterable[FlowRecord], jobs: int = 1) -> List[ClassificationResult]:
        """Classify flows, at most ``jobs`` at a time; results keep input order."""
        flows = list(flows)
        if jobs <= 1 or len(flows) <= 1:
            return [self.classify(flow) for flow in flows]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(self.classify, flows))


def result_record(result: ClassificationResult) -> Dict[str, Optional[str]]:
    """One line of the results file."""
    verdict = result.verdict
    reasoning = verdict.reasoning if verdict else None
    return {
        "flow_id": result.flow_id,
        "predicted": result.predicted,
        "true_label": result.true_label,
        "reasoning_digest": sha256_text(reasoning) if reasoning else None,
        "evidence_digest": evidence_digest(result.evidence) if result.evidence is not None else None,
        "prompt_digest": verdict.provenance.prompt_digest if verdict and verdict.provenance else None,
        "backend": verdict.provenance.backend if verdict and verdict.provenance else None,
        "error": result.error,
    }


def write_results(path: Union[str, Path], results: Iterable[ClassificationResult]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for result in results:
            handle.write(json.dumps(result_record(result), separators=(",", ":")) + "\n")
            count += 1
    return count
