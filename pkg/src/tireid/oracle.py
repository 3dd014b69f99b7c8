"""Multimodal oracle backends: wire, scripted replay, and seeded simulation.

All backends answer the same five operations (localize, vqa, aggregate,
decompose, rewrite) plus the query-refinement composite, so the
interaction engine and the augmentation pipeline run unmodified against
any of them:

* ``WireBackend`` talks to a chat-completions HTTP endpoint with bounded
  retries and exponential backoff, temperature pinned to 0.01 for
  reproducibility, and images attached as base64 data URLs.
* ``ScriptedBackend`` replays a fixed list of reply strings strictly in
  order through the same render/parse path; running out of replies is a
  test-harness error.
* ``SimulatedBackend`` is a ground-truth-aware double for desk-scale runs:
  localization verdicts come from identity equality, flipped with
  probability 1-p by a keyed hash, and refinement interpolates the query
  embedding toward the anchor image embedding. Every answer is a pure
  function of (seed, query id, image id, call ordinal), so reruns are
  bit-identical regardless of scheduling.
"""

from __future__ import annotations

import base64
import hashlib
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ImageRecord, TextRecord
from .errors import (
    ProtocolError,
    ScriptExhaustedError,
    TransportError,
    UnsupportedOperationError,
    ValidationError,
)
from .templates import (
    DEFAULT_QUESTIONS,
    PromptKind,
    PromptTemplate,
    QuestionSet,
    default_templates,
    parse_numbered_list,
    parse_verdict,
)

ORACLE_TEMPERATURE = 0.01
DEFAULT_WORD_CAP = 120


@dataclass(frozen=True)
class LocAnswer:
    """Yes/No anchor-localization verdict plus the unmodified raw reply."""

    verdict: bool  # True means Yes
    raw_reply: str


@dataclass(frozen=True)
class RefinedQuery:
    """Refined query: text from wire/scripted backends, an embedding from
    the simulated one. Exactly one of the two is set."""

    provenance: str
    refined_text: str | None = None
    refined_embedding: np.ndarray | None = None

    def __post_init__(self):
        if (self.refined_text is None) == (self.refined_embedding is None):
            raise ValidationError(
                "RefinedQuery needs exactly one of refined_text / refined_embedding"
            )
        if self.refined_text is not None and not self.refined_text:
            raise ValidationError("refined_text must be non-empty")
        if self.refined_embedding is not None:
            norm = float(np.linalg.norm(self.refined_embedding.astype(np.float64)))
            if abs(norm - 1.0) > 1e-3:
                raise ValidationError(f"refined_embedding not unit-norm ({norm})")


class OracleBackend:
    """Operation-level oracle interface; subclasses fill in behavior."""

    name = "abstract"
    #: oracle calls consumed by one refine_query (vqa + aggregate on text
    #: backends, none on the simulated one); used for trace accounting.
    refinement_call_cost = 0
    #: whether refine_query yields text that still needs embedding.
    refines_to_text = False

    def localize(self, query: TextRecord, image: ImageRecord) -> LocAnswer:
        raise NotImplementedError

    def refine_query(self, query: TextRecord, anchor: ImageRecord) -> RefinedQuery:
        raise NotImplementedError

    def vqa(self, questions: QuestionSet, image: ImageRecord) -> str:
        raise UnsupportedOperationError(f"{self.name} backend does not answer VQA")

    def aggregate(self, answers: str, query: TextRecord) -> RefinedQuery:
        raise UnsupportedOperationError(f"{self.name} backend does not aggregate")

    def decompose(self, text: str) -> list[str]:
        raise UnsupportedOperationError(f"{self.name} backend does not decompose")

    def rewrite(self, sub_sentence: str, m: int) -> list[str]:
        raise UnsupportedOperationError(f"{self.name} backend does not rewrite")


class _TextBackend(OracleBackend):
    """Shared render/parse logic for backends that exchange text replies."""

    refinement_call_cost = 2
    refines_to_text = True

    def __init__(
        self,
        templates: dict[PromptKind, PromptTemplate] | None = None,
        questions: QuestionSet = DEFAULT_QUESTIONS,
        word_cap: int = DEFAULT_WORD_CAP,
    ):
        self.templates = templates or default_templates()
        self.questions = questions
        self.word_cap = word_cap
        self.stats: Counter = Counter()
        self._stats_lock = threading.Lock()

    def _complete(self, prompt: str, image: ImageRecord | None) -> str:
        raise NotImplementedError

    def _bump(self, key: str, n: int = 1) -> None:
        with self._stats_lock:
            self.stats[key] += n

    def localize(self, query: TextRecord, image: ImageRecord) -> LocAnswer:
        prompt = self.templates[PromptKind.LOC].render(query=query.raw_text)
        reply = self._complete(prompt, image)
        self._bump("localize_calls")
        return LocAnswer(verdict=parse_verdict(reply), raw_reply=reply)

    def vqa(self, questions: QuestionSet, image: ImageRecord) -> str:
        prompt = self.templates[PromptKind.VQA].render(
            questions=questions.as_numbered_block()
        )
        reply = self._complete(prompt, image)
        self._bump("vqa_calls")
        return reply

    def aggregate(self, answers: str, query: TextRecord) -> RefinedQuery:
        if not answers.strip():
            # Nothing to merge: the query passes through without an oracle call.
            return RefinedQuery(provenance=self.name, refined_text=query.raw_text)
        prompt = self.templates[PromptKind.AGGR].render(
            answers=answers, query=query.raw_text
        )
        merged = self._complete(prompt, None)
        self._bump("aggregate_calls")
        if _word_count(merged) > self.word_cap:
            retry_prompt = (
                prompt + f"\nReply in at most {self.word_cap} words."
            )
            merged = self._complete(retry_prompt, None)
            self._bump("aggregate_retries")
            if _word_count(merged) > self.word_cap:
                merged = " ".join(merged.split()[: self.word_cap])
        if not merged.strip():
            raise ProtocolError("aggregation produced an empty merge", raw_reply=merged)
        return RefinedQuery(provenance=self.name, refined_text=merged)

    def refine_query(self, query: TextRecord, anchor: ImageRecord) -> RefinedQuery:
        answers = self.vqa(self.questions, anchor)
        return self.aggregate(answers, query)

    def decompose(self, text: str) -> list[str]:
        prompt = self.templates[PromptKind.DEC].render(text=text)
        reply = self._complete(prompt, None)
        self._bump("decompose_calls")
        return parse_numbered_list(reply)

    def rewrite(self, sub_sentence: str, m: int) -> list[str]:
        if m < 1:
            raise ValidationError(f"rewrite count m must be >= 1, got {m}")
        prompt = self.templates[PromptKind.RWT].render(text=sub_sentence, m=m)
        reply = self._complete(prompt, None)
        self._bump("rewrite_calls")
        items = parse_numbered_list(reply)
        if len(items) != m:
            raise ProtocolError(
                f"rewrite expected {m} variants, got {len(items)}", raw_reply=reply
            )
        dupes = sum(1 for item in items if item == sub_sentence)
        if dupes:
            self._bump("duplicate_rewrites", dupes)
        return items


def _word_count(text: str) -> int:
    return len(text.split())


@dataclass
class WireOracleConfig:
    """Where and how to reach the chat-completions service.

    The API key is read from ``api_key_env`` at call time; the endpoint
    comes from configuration. ``max_retries`` counts retries after the
    first attempt.
    """

    endpoint: str
    model: str
    api_key_env: str = "TIREID_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5


class WireBackend(_TextBackend):
    """HTTP chat-completions client with retries and image attachments."""

    name = "wire"

    def __init__(
        self,
        config: WireOracleConfig,
        templates: dict[PromptKind, PromptTemplate] | None = None,
        questions: QuestionSet = DEFAULT_QUESTIONS,
        word_cap: int = DEFAULT_WORD_CAP,
        session=None,
    ):
        super().__init__(templates=templates, questions=questions, word_cap=word_cap)
        self.config = config
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self._sleep = time.sleep

    def _headers(self) -> dict[str, str]:
        import os

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, prompt: str, image: ImageRecord | None) -> dict:
        content: list[dict] = [{"type": "text", "text": prompt}]
        if image is not None:
            payload = base64.b64encode(Path(image.source_path).read_bytes()).decode()
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:image/jpeg;base64,{payload}"},
                }
            )
        return {
            "model": self.config.model,
            "temperature": ORACLE_TEMPERATURE,
            "messages": [{"role": "user", "content": content}],
        }

    def _complete(self, prompt: str, image: ImageRecord | None) -> str:
        import requests

        body = self._body(prompt, image)
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
                self._bump("retries")
            try:
                resp = self.session.post(
                    self.config.endpoint,
                    json=body,
                    headers=self._headers(),
                    timeout=self.config.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code // 100 != 2:
                last_error = TransportError(
                    f"HTTP {resp.status_code} from {self.config.endpoint}"
                )
                continue
            try:
                reply = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(
                    f"malformed chat-completions reply: {exc}", raw_reply=resp.text
                ) from exc
            if not isinstance(reply, str):
                raise ProtocolError(
                    "chat-completions content is not a string", raw_reply=resp.text
                )
            return reply
        raise TransportError(
            f"request failed after {self.config.max_retries} retries: {last_error}"
        )


class ScriptedBackend(_TextBackend):
    """Replays canned replies in order; deterministic and budget-observable."""

    name = "scripted"

    def __init__(
        self,
        replies: list[str],
        templates: dict[PromptKind, PromptTemplate] | None = None,
        questions: QuestionSet = DEFAULT_QUESTIONS,
        word_cap: int = DEFAULT_WORD_CAP,
    ):
        super().__init__(templates=templates, questions=questions, word_cap=word_cap)
        self.replies = list(replies)
        self.requests: list[tuple[str, str | None]] = []
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedBackend":
        import json

        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, list) or not all(isinstance(x, str) for x in doc):
            raise ValidationError(f"{path}: script file must be a JSON array of strings")
        return cls(doc, **kwargs)

    @property
    def consumed(self) -> int:
        return self._cursor

    def _complete(self, prompt: str, image: ImageRecord | None) -> str:
        with self._lock:
            if self._cursor >= len(self.replies):
                raise ScriptExhaustedError(
                    f"script exhausted after {len(self.replies)} replies"
                )
            reply = self.replies[self._cursor]
            self._cursor += 1
            self.requests.append((prompt, image.image_id if image else None))
        return reply


@dataclass(frozen=True)
class SimulatedOracleConfig:
    """Ground-truth-aware double: p is localization accuracy, beta the
    interpolation strength pulling the query embedding toward the anchor."""

    localization_accuracy: float
    refinement_strength: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.localization_accuracy <= 1.0:
            raise ValidationError("localization_accuracy must be in [0, 1]")
        if not 0.0 <= self.refinement_strength <= 1.0:
            raise ValidationError("refinement_strength must be in [0, 1]")


def _keyed_uniform(seed: int, query_id: str, image_id: str, ordinal: int) -> float:
    digest = hashlib.sha256(
        f"{seed}|{query_id}|{image_id}|{ordinal}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class SimulatedBackend(OracleBackend):
    """Identity-aware localization with keyed noise, embedding interpolation
    for refinement. Text operations are unsupported by design."""

    name = "simulated"
    refinement_call_cost = 0
    refines_to_text = False

    def __init__(
        self,
        config: SimulatedOracleConfig,
        text_embeddings: np.ndarray,
        image_embeddings: np.ndarray,
    ):
        self.config = config
        self.text_embeddings = np.asarray(text_embeddings, dtype=np.float32)
        self.image_embeddings = np.asarray(image_embeddings, dtype=np.float32)
        self._ordinals: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def _next_ordinal(self, query_id: str, image_id: str) -> int:
        key = (query_id, image_id)
        with self._lock:
            ordinal = self._ordinals.get(key, 0)
            self._ordinals[key] = ordinal + 1
        return ordinal

    def localize(self, query: TextRecord, image: ImageRecord) -> LocAnswer:
        truth = query.person_id == image.person_id
        ordinal = self._next_ordinal(query.text_id, image.image_id)
        u = _keyed_uniform(self.config.seed, query.text_id, image.image_id, ordinal)
        flip = u >= self.config.localization_accuracy
        verdict = truth != flip
        return LocAnswer(verdict=verdict, raw_reply="Yes" if verdict else "No")

    def refine_query(self, query: TextRecord, anchor: ImageRecord) -> RefinedQuery:
        beta = self.config.refinement_strength
        e_q = self.text_embeddings[query.embedding_index]
        e_a = self.image_embeddings[anchor.embedding_index]
        if beta == 0.0:
            blended = e_q.copy()
        elif beta == 1.0:
            blended = e_a.copy()
        else:
            mix = (1.0 - beta) * e_q.astype(np.float64) + beta * e_a.astype(np.float64)
            norm = np.linalg.norm(mix)
            if norm < 1e-12:
                raise ValidationError(
                    "refinement interpolation collapsed to the zero vector"
                )
            blended = (mix / norm).astype(np.float32)
        return RefinedQuery(provenance=self.name, refined_embedding=blended)
