"""Prompt construction and generation backends.

Two backends speak the same interface: an HTTP client for any
OpenAI-compatible chat-completions server (with per-token logprobs and
optional image input), and a replay backend that returns canned candidates
byte-identically for deterministic runs.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx

from .schema import SchemaDef, to_output_schema

logger = logging.getLogger(__name__)

PROMPT_HEADER = (
    "Your task is to extract the information for the fields provided below. "
    "Extract the information in JSON format according to the following JSON schema:"
)
PROMPT_FOOTER = "Please read the text carefully and follow the instructions."
IMAGE_NOTE = "An image of the document is provided below."

DEFAULT_GUIDELINES = (
    "Extract only the elements that are present verbatim in the document text. "
    "Do NOT infer any information.",
    "Extract each element EXACTLY as it appears in the document.",
    "Each value in the OCR can only be used AT MOST once. If a value can "
    "correspond to multiple fields, pick the best one.",
    "For each object, output all the keys from the schema even if the value is "
    "null. Empty lists should be outputted as lists with no elements.",
    "If no indication of tax is given, assume the amounts to be gross amounts.",
)


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    pass


class AuthError(BackendError):
    pass


class MissingFixtureError(BackendError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    output_schema: dict
    guidelines: tuple[str, ...]
    ocr_text: str
    image_path: str | None = None
    include_image: bool = False

    def render(self) -> str:
        parts = [PROMPT_HEADER, json.dumps(self.output_schema, indent=2)]
        if self.guidelines:
            parts.append("Additional guidelines:\n" + "\n".join(
                f"- {g}" for g in self.guidelines))
        parts.append(f"<ocr>\n{self.ocr_text}\n</ocr>")
        parts.append(PROMPT_FOOTER)
        if self.include_image:
            parts.append(IMAGE_NOTE)
        return "\n".join(parts)


def build_prompt(
    schema: SchemaDef,
    ocr_text: str,
    *,
    guidelines: tuple[str, ...] | None = None,
    image_path: str | None = None,
    include_image: bool = False,
) -> PromptSpec:
    if not ocr_text:
        raise ValueError("ocr_text must be non-empty")
    return PromptSpec(
        output_schema=to_output_schema(schema),
        guidelines=DEFAULT_GUIDELINES if guidelines is None else tuple(guidelines),
        ocr_text=ocr_text,
        image_path=image_path,
        include_image=include_image,
    )


@dataclass(frozen=True)
class TokenProb:
    token: str
    prob: float

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"token probability {self.prob} outside [0, 1]")


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    sample_index: int
    raw_text: str
    tokens: tuple[TokenProb, ...] = ()
    finish_reason: str = "stop"

    def mean_token_prob(self) -> float | None:
        if not self.tokens:
            return None
        return sum(t.prob for t in self.tokens) / len(self.tokens)

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "sample_index": self.sample_index,
            "raw_text": self.raw_text,
            "tokens": [{"t": t.token, "p": t.prob} for t in self.tokens],
            "finish_reason": self.finish_reason,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Candidate":
        return cls(
            doc_id=obj["doc_id"],
            sample_index=obj["sample_index"],
            raw_text=obj["raw_text"],
            tokens=tuple(TokenProb(t["t"], t["p"]) for t in obj.get("tokens", [])),
            finish_reason=obj.get("finish_reason", "stop"),
        )


@dataclass(frozen=True)
class GenerationRequest:
    doc_id: str
    prompt: PromptSpec
    temperature: float = 0.0
    n_samples: int = 1
    max_tokens: int = 2048
    want_token_probs: bool = True
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.temperature == 0 and self.n_samples != 1:
            raise ValueError("greedy decoding (temperature 0) implies n_samples == 1")


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> list[Candidate]:
        ...


def select_best(candidates: list[Candidate]) -> Candidate | None:
    """The candidate with the highest arithmetic-mean token probability.

    Ties break to the lowest sample index; candidates without token
    probabilities rank below any candidate that has them."""
    best = None
    best_key: tuple | None = None
    for candidate in sorted(candidates, key=lambda c: c.sample_index):
        mean = candidate.mean_token_prob()
        key = (1, mean) if mean is not None else (0, 0.0)
        if best_key is None or key > best_key:
            best, best_key = candidate, key
    return best


# ---------------------------------------------------------------------------
# HTTP backend


_MIME_BY_SUFFIX = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg",
                   ".webp": "image/webp", ".gif": "image/gif"}


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 120.0
    max_retries: int = 3
    backoff: float = 0.5


class HttpBackend:
    """Client for OpenAI-compatible /chat/completions endpoints."""

    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._warned_no_logprobs = False

    def _message_content(self, prompt: PromptSpec):
        text = prompt.render()
        if not (prompt.include_image and prompt.image_path):
            return text
        data = Path(prompt.image_path).read_bytes()
        mime = _MIME_BY_SUFFIX.get(Path(prompt.image_path).suffix.lower(), "image/png")
        encoded = base64.b64encode(data).decode("ascii")
        return [
            {"type": "text", "text": text},
            {"type": "image_url",
             "image_url": {"url": f"data:{mime};base64,{encoded}"}},
        ]

    def _post(self, body: dict) -> dict:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                response = self._client.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"authentication failed against {url}")
            if response.status_code == 429 or response.status_code >= 500:
                last_error = BackendError(
                    f"{url} answered {response.status_code}")
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"{url} answered {response.status_code}: {response.text[:200]}")
            return response.json()
        raise TransportError(f"giving up on {url}: {last_error}")

    def generate(self, request: GenerationRequest) -> list[Candidate]:
        body = {
            "model": self.config.model,
            "messages": [
                {"role": "user", "content": self._message_content(request.prompt)}
            ],
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
        }
        if request.want_token_probs:
            body["logprobs"] = True
        if request.seed is not None:
            body["seed"] = request.seed

        data = self._post(body)
        choices = data.get("choices") or []
        if len(choices) != request.n_samples:
            raise BackendError(
                f"backend returned {len(choices)} choices, expected {request.n_samples}")
        candidates = []
        for index, choice in enumerate(choices):
            message = choice.get("message") or {}
            tokens: list[TokenProb] = []
            logprobs = (choice.get("logprobs") or {}).get("content")
            if logprobs:
                for entry in logprobs:
                    prob = min(1.0, max(0.0, math.exp(entry["logprob"])))
                    tokens.append(TokenProb(entry["token"], prob))
            elif request.want_token_probs and not self._warned_no_logprobs:
                self._warned_no_logprobs = True
                logger.warning(
                    "backend does not report token probabilities; selection "
                    "will fall back to first-valid-candidate")
            candidates.append(
                Candidate(
                    doc_id=request.doc_id,
                    sample_index=index,
                    raw_text=message.get("content") or "",
                    tokens=tuple(tokens),
                    finish_reason=choice.get("finish_reason") or "stop",
                )
            )
        return candidates


# ---------------------------------------------------------------------------
# Replay backend


class ReplayBackend:
    """Serves canned candidates keyed by (doc_id, sample_index)."""

    def __init__(self, store: dict[tuple[str, int], Candidate]):
        self._store = dict(store)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ReplayBackend":
        store: dict[tuple[str, int], Candidate] = {}
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                candidate = Candidate.from_json(json.loads(line))
                store[(candidate.doc_id, candidate.sample_index)] = candidate
        return cls(store)

    def generate(self, request: GenerationRequest) -> list[Candidate]:
        out = []
        for index in range(request.n_samples):
            key = (request.doc_id, index)
            if key not in self._store:
                raise MissingFixtureError(
                    f"no fixture for document {request.doc_id!r} sample {index}")
            out.append(self._store[key])
        return out
