"""Grounded-evidence verbalization and the answer-generation client.

The reasoning prompt renders each evidence item as a numbered block (topic
entity, relation path, end entities) followed by the question. Answers come
back one per line. The endpoint speaks the ubiquitous chat-completion JSON
protocol; an offline union mock stands in for it in tests and returns every
grounded end entity.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import requests

from .errors import PathQAError
from .paths import GroundedEvidence

logger = logging.getLogger(__name__)

REASONING_INSTRUCTION = (
    "You are a helpful and precise assistant for answering questions based "
    "on the provided reasoning paths on a knowledge graph. Please return all "
    "the possible answers from the entities mentioned in the reasoning "
    "paths. Please return each answer at a new line."
)
ARROW = "→"
SEP_TOKEN = "<SEP>"
_LIST_MARKER = re.compile(r"^\s*(?:[-*•]+|\(?\d{1,3}[.)])\s+")


class ReasonerError(PathQAError):
    """Endpoint failures (after retries) or malformed replies."""


@dataclass(frozen=True)
class UsageStats:
    """Token/call accounting for one model interaction."""

    input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "calls": self.calls,
        }


@dataclass(frozen=True)
class ReasonerRequest:
    """One reasoning call: the question plus ordered grounded evidence."""

    question: str
    evidence: tuple[GroundedEvidence, ...] = ()
    model: str = ""
    endpoint: str = ""
    timeout: float = 30.0
    max_retries: int = 3


@dataclass(frozen=True)
class ReasonerResponse:
    """Parsed answers (first = top-1, deduplicated in order) plus usage."""

    answers: tuple[str, ...]
    raw_text: str
    usage: UsageStats


def prompt_parts(question: str, evidence: Sequence[GroundedEvidence]) -> tuple[str, str]:
    """(system, user) message pair; ``verbalize_evidence`` is their join."""
    if evidence:
        lines = ["Reasoning Paths:", ""]
        for i, item in enumerate(evidence, start=1):
            lines.append(f"[PATH{i}]")
            lines.append(f"Topic Entity: {item.start.label},")
            lines.append(f"Relation Path: {f' {ARROW} '.join(item.path.labels)}")
            lines.append(f"End Entities: {f' {SEP_TOKEN} '.join(e.label for e in item.ends)}")
            lines.append("")
        lines.append(f"Question: {question}")
        user = "\n".join(lines)
    else:
        user = f"Question: {question}"
    return REASONING_INSTRUCTION, user


def verbalize_evidence(question: str, evidence: Sequence[GroundedEvidence]) -> str:
    """Deterministic full prompt text: instruction, PATH blocks, question."""
    system, user = prompt_parts(question, evidence)
    return f"{system}\n\n{user}"


def parse_answer_lines(text: str) -> tuple[str, ...]:
    """Nonempty reply lines in order, list markers stripped, deduplicated."""
    answers: list[str] = []
    seen: set[str] = set()
    for line in text.splitlines():
        cleaned = _LIST_MARKER.sub("", line).strip()
        if cleaned and cleaned not in seen:
            seen.add(cleaned)
            answers.append(cleaned)
    return tuple(answers)


class ChatCompletionClient:
    """Minimal chat-completion HTTP client with retries and backoff.

    Transient failures (connection errors, timeouts, HTTP 429/5xx) are
    retried up to ``max_retries`` times with exponential backoff; other HTTP
    errors and malformed bodies fail immediately. The API key is read from
    ``api_key_env`` when set.
    """

    def __init__(self, endpoint: str, model: str, *, timeout: float = 30.0,
                 max_retries: int = 3, backoff: float = 0.5,
                 api_key_env: str = "PATHQA_API_KEY", session=None):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.api_key_env = api_key_env
        self._session = session or requests.Session()

    def complete(self, system: str, user: str) -> tuple[str, dict | None]:
        import os

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        last_failure = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    self.endpoint, headers=headers, data=json.dumps(payload),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_failure = f"connection failure: {exc}"
                logger.warning("chat endpoint attempt %d failed: %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_failure = f"HTTP {resp.status_code}"
                logger.warning("chat endpoint attempt %d failed: %s", attempt + 1, last_failure)
                continue
            if resp.status_code != 200:
                raise ReasonerError(f"chat endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse_body(resp)
        raise ReasonerError(
            f"chat endpoint failed after {self.max_retries + 1} attempts; last: {last_failure}"
        )

    @staticmethod
    def _parse_body(resp) -> tuple[str, dict | None]:
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ReasonerError(f"malformed chat-completion reply: {exc}") from None
        if not isinstance(content, str):
            raise ReasonerError("malformed chat-completion reply: content is not a string")
        usage = data.get("usage") if isinstance(data.get("usage"), dict) else None
        return content, usage


def mock_union_reasoner(request: ReasonerRequest) -> ReasonerResponse:
    """Offline double: answers are the union of grounded end-entity labels.

    Order is first appearance across the evidence list; no network calls are
    made, and token usage is the whitespace-token count of the verbalized
    prompt and reply.
    """
    answers: list[str] = []
    seen: set[str] = set()
    for item in request.evidence:
        for end in item.ends:
            if end.label not in seen:
                seen.add(end.label)
                answers.append(end.label)
    raw_text = "\n".join(answers)
    prompt = verbalize_evidence(request.question, request.evidence)
    usage = UsageStats(
        input_tokens=len(prompt.split()),
        output_tokens=len(raw_text.split()),
        calls=0,
    )
    return ReasonerResponse(answers=tuple(answers), raw_text=raw_text, usage=usage)


def reason(request: ReasonerRequest, client=None) -> ReasonerResponse:
    """Verbalize, call the client (or the union mock when ``client`` is None),
    and parse the reply into an ordered, deduplicated answer list.

    Model lines are never reordered, so the top-1 answer is the model's first
    line. Usage comes from the endpoint's report when present, otherwise from
    whitespace tokenization.
    """
    if client is None:
        return mock_union_reasoner(request)
    if not request.evidence:
        logger.info("reasoning without evidence for question %r", request.question[:60])
    system, user = prompt_parts(request.question, request.evidence)
    text, endpoint_usage = client.complete(system, user)
    prompt = f"{system}\n\n{user}"
    if endpoint_usage and "prompt_tokens" in endpoint_usage:
        input_tokens = int(endpoint_usage["prompt_tokens"])
        output_tokens = int(endpoint_usage.get("completion_tokens", 0))
    else:
        input_tokens = len(prompt.split())
        output_tokens = len(text.split())
    return ReasonerResponse(
        answers=parse_answer_lines(text),
        raw_text=text,
        usage=UsageStats(input_tokens=input_tokens, output_tokens=output_tokens, calls=1),
    )


def run_reasoner(
    requests_by_id: Sequence[tuple[str, ReasonerRequest]],
    client=None,
    *,
    max_in_flight: int = 4,
    latencies: dict[str, float] | None = None,
) -> dict[str, ReasonerResponse]:
    """Answer many questions, joining responses to questions by id.

    With a real client, at most ``max_in_flight`` requests are outstanding;
    the pure mock runs unbounded. Result order never depends on completion
    order. Pass a dict as ``latencies`` to collect per-question wall seconds
    (for the transcript log; latency never enters deterministic artifacts).
    """

    def timed(qid: str, req: ReasonerRequest) -> ReasonerResponse:
        started = time.perf_counter()
        response = reason(req, client)
        if latencies is not None:
            latencies[qid] = time.perf_counter() - started
        return response

    if client is None:
        return {qid: timed(qid, req) for qid, req in requests_by_id}
    results: dict[str, ReasonerResponse] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        futures = {qid: pool.submit(timed, qid, req) for qid, req in requests_by_id}
        for qid, future in futures.items():
            results[qid] = future.result()
    return results
