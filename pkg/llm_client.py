"""Answer generation: pluggable completion backends and verdict parsing."""

import re
import threading
import time
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import requests

from config import BackendConfig
from data_models import NOVEL_LABEL, EvidenceSet, RenderedPrompt, Verdict
from errors import BackendError, BackendTimeoutError, VerdictParseError
from utils.formatting import format_distance
from utils.logger import logger

_ANSWER_LINE = re.compile(r"^\s*\**\s*ANSWER\s*\**\s*:\s*(.*?)\s*$", re.IGNORECASE)
_RECOVERY_WINDOW = 3


def decide_mock(ev: EvidenceSet) -> str:
    """Evidence-majority label: most kept items, then smallest best distance, then name."""
    if not ev.pool:
        return NOVEL_LABEL
    counts: Dict[str, int] = defaultdict(int)
    best: Dict[str, float] = {}
    for item in ev.pool:
        counts[item.class_label] += 1
        best[item.class_label] = min(best.get(item.class_label, float("inf")), item.distance)
    return min(counts, key=lambda label: (-counts[label], best[label], label))


def mock_response(ev: EvidenceSet, reasoning: bool) -> str:
    label = decide_mock(ev)
    if not reasoning:
        return f"ANSWER: {label}"

    lines: List[str] = []
    if not ev.pool:
        lines.append("No retrieved evidence survived pruning in any view.")
    else:
        by_label: Dict[str, List[float]] = defaultdict(list)
        for item in ev.pool:
            by_label[item.class_label].append(item.distance)
        for name in sorted(by_label):
            distances = by_label[name]
            lines.append(
                f"Evidence for {name}: {len(distances)} kept samples, "
                f"best distance {format_distance(min(distances))}."
            )
    lines.append(f"ANSWER: {label}")
    return "\n".join(lines)


def _label_pattern(label: str) -> re.Pattern:
    return re.compile(rf"(?<![\w-]){re.escape(label)}(?![\w-])", re.IGNORECASE)


def parse_verdict(raw: str, label_space: Sequence[str], reasoning: bool = False) -> Verdict:
    """Extract the final label from a backend response.

    The last ``ANSWER: <label>`` line wins when it names a label exactly.
    Otherwise a label mentioned (case-insensitively, as a whole word) in
    the last three non-empty lines is accepted only if it is the only one.
    """
    if not label_space or NOVEL_LABEL not in label_space:
        raise VerdictParseError("label space must be non-empty and contain the novel label", raw)

    lines = raw.strip().splitlines()
    for index in range(len(lines) - 1, -1, -1):
        match = _ANSWER_LINE.match(lines[index])
        if not match:
            continue
        candidate = match.group(1).strip().strip("*`'\".").strip()
        if candidate in label_space:
            rest = "\n".join(lines[:index] + lines[index + 1:]).strip()
            return Verdict(label=candidate, reasoning=rest if reasoning and rest else None)
        break

    tail = [line for line in lines if line.strip()][-_RECOVERY_WINDOW:]
    window = "\n".join(tail)
    found = [label for label in label_space if _label_pattern(label).search(window)]
    if len(found) == 1:
        text = raw.strip()
        return Verdict(label=found[0], reasoning=text if reasoning and text else None)

    reason = "no label found" if not found else f"ambiguous labels {', '.join(found)}"
    raise VerdictParseError(f"could not extract a verdict: {reason}", raw)


class LLMClient:
    """Completion backend wrapper with bounded concurrency and per-call retries."""

    def __init__(self, cfg: Optional[BackendConfig] = None, session: Optional[requests.Session] = None):
        self.cfg = cfg or BackendConfig()
        self.session = session or requests.Session()
        self._in_flight = threading.BoundedSemaphore(self.cfg.max_in_flight)

    @property
    def identity(self) -> str:
        return self.cfg.identity

    def generate(self, prompt: RenderedPrompt) -> str:
        """Raw response text for ``prompt``."""
        if self.cfg.kind == "mock_majority":
            return mock_response(prompt.evidence, prompt.reasoning)
        with self._in_flight:
            return self._generate_remote(prompt)

    def _request_body(self, prompt: RenderedPrompt) -> dict:
        return {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.cfg.temperature,
        }

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        return headers

    def _generate_remote(self, prompt: RenderedPrompt) -> str:
        attempts = 1 + self.cfg.max_retries
        last_error: Optional[BackendError] = None

        for attempt in range(1, attempts + 1):
            try:
                response = self.session.post(
                    self.cfg.endpoint_url,
                    json=self._request_body(prompt),
                    headers=self._headers(),
                    timeout=self.cfg.timeout_seconds,
                )
            except requests.exceptions.Timeout as e:
                logger.log_backend_call(self.identity, False, attempt)
                last_error = BackendTimeoutError(f"request timed out after {self.cfg.timeout_seconds}s: {e}")
            except requests.exceptions.RequestException as e:
                logger.log_backend_call(self.identity, False, attempt)
                last_error = BackendError(f"request failed: {e}")
            else:
                status = response.status_code
                if 200 <= status < 300:
                    logger.log_backend_call(self.identity, True, attempt, status)
                    return self._extract_text(response)
                logger.log_backend_call(self.identity, False, attempt, status)
                last_error = BackendError("backend returned a non-success status", status=status)
                if status != 429 and status < 500:
                    raise last_error

            if attempt < attempts and self.cfg.retry_backoff_seconds > 0:
                time.sleep(self.cfg.retry_backoff_seconds * attempt)

        raise last_error

    @staticmethod
    def _extract_text(response: requests.Response) -> str:
        try:
            body = response.json()
        except ValueError:
            return response.text
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return response.text
        return content if isinstance(content, str) else response.text


def generate(prompt: RenderedPrompt, cfg: BackendConfig) -> str:
    return LLMClient(cfg).generate(prompt)


# Global client using the offline evidence-majority backend
llm_client = LLMClient()
