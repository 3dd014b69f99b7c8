"""Embedding sources for text-valued refined queries.

Refined queries coming back from a text backend still need a vector before
fusion. Two routes, both kept out of process: a live embeddings HTTP
service, or a pre-supplied file keyed by query id for two-pass workflows
(run the interaction once, embed the refined texts offline, re-run fusion).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TextRecord, normalize_rows
from .errors import ProtocolError, TransportError, ValidationError


class EmbeddingSource:
    def embedding_for(self, query: TextRecord, refined_text: str) -> np.ndarray:
        """Unit-norm float32 vector for one refined query."""
        raise NotImplementedError


@dataclass
class WireEmbedderConfig:
    endpoint: str
    model: str
    api_key_env: str = "TIREID_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5


class WireTextEmbedder(EmbeddingSource):
    """Client for an embeddings endpoint: POST {model, input} -> data[].embedding."""

    def __init__(self, config: WireEmbedderConfig, session=None):
        self.config = config
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self._sleep = time.sleep

    def embedding_for(self, query: TextRecord, refined_text: str) -> np.ndarray:
        import os

        import requests

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.config.model, "input": [refined_text]}
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    self.config.endpoint,
                    json=body,
                    headers=headers,
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
                vector = resp.json()["data"][0]["embedding"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(
                    f"malformed embeddings reply: {exc}", raw_reply=resp.text
                ) from exc
            return _as_unit_row(vector)
        raise TransportError(
            f"embedding request failed after {self.config.max_retries} retries: "
            f"{last_error}"
        )


class RefinedEmbeddingFile(EmbeddingSource):
    """Pre-supplied refined embeddings: a JSON object mapping text_id -> vector."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        self.vectors = vectors

    @classmethod
    def load(cls, path: str | Path) -> "RefinedEmbeddingFile":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValidationError(
                f"{path}: refined-embeddings file must be a JSON object"
            )
        return cls({key: _as_unit_row(vec) for key, vec in doc.items()})

    def embedding_for(self, query: TextRecord, refined_text: str) -> np.ndarray:
        vec = self.vectors.get(query.text_id)
        if vec is None:
            raise ValidationError(
                f"no refined embedding supplied for query {query.text_id!r}"
            )
        return vec


def _as_unit_row(vector) -> np.ndarray:
    arr = np.asarray(vector, dtype=np.float32).reshape(1, -1)
    return normalize_rows(arr)[0]
