"""LLM backends: a classifier and a free-text completer behind one object.

Two implementations share the interface ``classify(prompt, example)`` and
``complete(system, user, role=None, salt=0)``:

* :class:`SimulatedBackend` answers from a keyword oracle. Correctness of a
  (prompt, example) pair comes from a stable 64-bit hash, so results are
  order independent and reproducible.
* :class:`HTTPBackend` talks to any chat-completions endpoint.
"""
from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .dataset import Example
from .exceptions import BackendError, ContractError, ExtractionError

logger = logging.getLogger(__name__)

ORIGINS = ("seed", "gradient_edit", "mc_paraphrase")
ROLES = ("gradient", "edit", "paraphrase", "chat")

POSITIVE_TOKENS = ("yes", "1", "true")
NEGATIVE_TOKENS = ("no", "0", "false")

NO_MISSING_FEATURES = "NO MISSING FEATURES: the prompt already covers every relevant cue."


def prompt_id(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def hash64(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def unit_hash(*parts) -> float:
    """Map ``parts`` to a deterministic number in [0, 1)."""
    return hash64(*parts) / 2.0**64


@dataclass(frozen=True)
class Prompt:
    text: str
    origin: str = "seed"
    parent_id: str | None = None
    id: str = field(init=False, compare=False)

    def __post_init__(self):
        text = self.text.strip() if isinstance(self.text, str) else self.text
        if not isinstance(text, str) or not text:
            raise ContractError("prompt text must be a non-empty string")
        if self.origin not in ORIGINS:
            raise ContractError(f"unknown prompt origin {self.origin!r}")
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "id", prompt_id(text))

    def to_dict(self):
        return {"id": self.id, "text": self.text, "origin": self.origin,
                "parent_id": self.parent_id}


def _keyword_pattern(keyword):
    return re.compile(r"(?<!\w)" + re.escape(keyword) + r"(?!\w)", re.IGNORECASE)


@dataclass(frozen=True)
class SimulatedOracle:
    """Keyword-driven stand-in for an LLM classifier.

    Prompt quality is the summed weight of the feature keywords it mentions;
    an example is answered correctly with probability
    ``base + (max - base) * quality``. Reversal keywords flip every answer.
    """

    feature_keywords: Mapping[str, float]
    base_accuracy: float = 0.5
    max_accuracy: float = 0.95
    reversal_keywords: Sequence[str] = ()
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_keywords", dict(self.feature_keywords))
        object.__setattr__(self, "reversal_keywords", tuple(self.reversal_keywords))
        if not 0.0 <= self.base_accuracy <= self.max_accuracy <= 1.0:
            raise ContractError("need 0 <= base_accuracy <= max_accuracy <= 1")
        for kw, w in self.feature_keywords.items():
            if not 0.0 <= w <= 1.0:
                raise ContractError(f"keyword weight for {kw!r} outside [0, 1]")

    def present_keywords(self, text):
        return [kw for kw in self.feature_keywords if _keyword_pattern(kw).search(text)]

    def missing_keywords(self, text):
        present = set(self.present_keywords(text))
        return [kw for kw in self.feature_keywords if kw not in present]

    def quality(self, text):
        q = sum(self.feature_keywords[kw] for kw in self.present_keywords(text))
        return min(max(q, 0.0), 1.0)

    def is_reversal(self, text):
        return any(_keyword_pattern(kw).search(text) for kw in self.reversal_keywords)

    def correctness_probability(self, text):
        return self.base_accuracy + (self.max_accuracy - self.base_accuracy) * self.quality(text)

    def expected_accuracy(self, text):
        """Population accuracy of a prompt, accounting for label reversal."""
        c = self.correctness_probability(text)
        return 1.0 - c if self.is_reversal(text) else c

    def is_correct(self, prompt: Prompt, example: Example):
        return unit_hash(prompt.id, example.id, self.rng_seed) < self.correctness_probability(prompt.text)

    def answer(self, prompt: Prompt, example: Example) -> int:
        label = example.label if self.is_correct(prompt, example) else 1 - example.label
        if self.is_reversal(prompt.text):
            label = 1 - label
        return label

    def to_dict(self):
        return {"feature_keywords": dict(self.feature_keywords),
                "base_accuracy": self.base_accuracy, "max_accuracy": self.max_accuracy,
                "reversal_keywords": list(self.reversal_keywords), "rng_seed": self.rng_seed}


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "simulated"
    endpoint: str | None = None
    model_name: str | None = None
    api_key_env: str | None = None
    temperature: float = 0.0
    request_timeout: float = 30.0
    max_retries: int = 3
    rng_seed: int = 0
    max_concurrency: int = 1
    retry_backoff: float = 0.5

    def __post_init__(self):
        if self.kind not in ("simulated", "http"):
            raise ContractError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint and self.model_name):
            raise ContractError("http backend requires endpoint and model_name")
        if self.temperature < 0:
            raise ContractError("temperature must be >= 0")
        if self.max_retries < 0 or self.max_concurrency < 1:
            raise ContractError("max_retries >= 0 and max_concurrency >= 1 required")


def extract_label(response_text: str, positive=POSITIVE_TOKENS, negative=NEGATIVE_TOKENS) -> int:
    """Return the label of the first positive/negative token in the response."""
    pos = {t.lower() for t in positive}
    neg = {t.lower() for t in negative}
    for token in re.findall(r"[a-z0-9]+", response_text.lower()):
        if token in pos:
            return 1
        if token in neg:
            return 0
    raise ExtractionError("no label token in response", raw_response=response_text)


class _CallCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.classify_calls = 0
        self.complete_calls = 0

    def _bump(self, name):
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    @property
    def calls(self):
        return {"classify": self.classify_calls, "complete": self.complete_calls}


# --- simulated role behaviour -------------------------------------------------

_TAG = re.compile(r"<(prompt|critique)>(.*?)</\1>", re.DOTALL)
_SUFFIX = re.compile(r"\s*\(variant [0-9a-f]{4}\)$")
SYNONYMS = {
    "determine": "decide", "decide": "determine",
    "whether": "if",
    "statement": "claim", "claim": "statement",
    "classify": "label", "label": "classify",
    "consider": "weigh", "weigh": "consider",
    "using": "based on",
}
_SYNONYM_RE = re.compile(r"\b(" + "|".join(sorted(SYNONYMS, key=len, reverse=True)) + r")\b",
                         re.IGNORECASE)
CLOSINGS = ("Answer carefully.", "Be precise.", "Think it through.", "Answer briefly.")


def _tagged(text, tag):
    for name, body in _TAG.findall(text):
        if name == tag:
            return body.strip()
    return None


def _match_case(src, word):
    return word[:1].upper() + word[1:] if src[:1].isupper() else word


class SimulatedBackend(_CallCounter):
    """Offline backend answering from a :class:`SimulatedOracle`.

    Role calls expect the prompt under revision wrapped in ``<prompt>`` tags
    and, for edits, the critique in ``<critique>`` tags (the default role
    templates do this). Calls without a role behave like a chat assistant.
    """

    def __init__(self, oracle: SimulatedOracle, config: BackendConfig | None = None):
        super().__init__()
        self.oracle = oracle
        self.config = config or BackendConfig(rng_seed=oracle.rng_seed)

    def classify(self, prompt: Prompt, example: Example) -> int:
        self._bump("classify_calls")
        return self.oracle.answer(prompt, example)

    def complete(self, role_system_prompt: str, user_message: str, role=None, salt=0) -> str:
        self._bump("complete_calls")
        if role == "gradient":
            return self._critique(user_message, salt)
        if role == "edit":
            return self._edit(user_message)
        if role == "paraphrase":
            return self._paraphrase(user_message, salt)
        return self._chat(role_system_prompt, user_message)

    def _critique(self, user_message, salt):
        text = _tagged(user_message, "prompt") or user_message
        missing = self.oracle.missing_keywords(text)
        if not missing:
            return NO_MISSING_FEATURES
        kw = missing[hash64("grad", user_message, salt, self.oracle.rng_seed) % len(missing)]
        return f'The prompt never tells the model to use the "{kw}", which explains these errors.'

    def _edit(self, user_message):
        text = _tagged(user_message, "prompt") or ""
        critique = _tagged(user_message, "critique") or ""
        for kw in self.oracle.missing_keywords(text):
            if f'"{kw}"' in critique:
                return f"{_SUFFIX.sub('', text)} Consider the {kw}."
        return text

    def _paraphrase(self, user_message, salt):
        text = _SUFFIX.sub("", _tagged(user_message, "prompt") or "")
        protected = [m.span() for kw in list(self.oracle.feature_keywords) + list(self.oracle.reversal_keywords)
                     for m in _keyword_pattern(kw).finditer(text)]

        def swap(m):
            if any(a < m.end() and m.start() < b for a, b in protected):
                return m.group(0)
            return _match_case(m.group(0), SYNONYMS[m.group(0).lower()])

        body = _SYNONYM_RE.sub(swap, text)
        h = hash64("mc", text, salt, self.oracle.rng_seed)
        for closing in CLOSINGS:
            body = body.replace(" " + closing, "")
        return f"{body} {CLOSINGS[h % len(CLOSINGS)]} (variant {h >> 48:04x})"

    def _chat(self, system, user):
        c = self.oracle.correctness_probability(system)
        topic = user.strip().rstrip("?.!") or "that"
        if unit_hash("chat", prompt_id(system), user, self.oracle.rng_seed) < c:
            return f'Before I answer, could you clarify which "{topic}" you mean?'
        return f'Here is an overview of "{topic}".'


class HTTPBackend(_CallCounter):
    """Chat-completions client with bounded concurrency and retries."""

    def __init__(self, config: BackendConfig, client=None, positive=POSITIVE_TOKENS,
                 negative=NEGATIVE_TOKENS):
        import httpx

        super().__init__()
        if config.kind != "http":
            raise ContractError("HTTPBackend needs an http BackendConfig")
        self.config = config
        self.positive, self.negative = positive, negative
        headers = {}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=config.request_timeout)
        self._headers = headers
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._httpx = httpx

    @property
    def url(self):
        return self.config.endpoint.rstrip("/") + "/chat/completions"

    def _post(self, system, user):
        body = {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": [{"role": "system", "content": system},
                         {"role": "user", "content": user}],
        }
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.retry_backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(self.url, json=body, headers=self._headers,
                                             timeout=self.config.request_timeout)
            except self._httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
                continue
            except self._httpx.TransportError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError):
                raise BackendError(f"unexpected response body: {resp.text[:200]}") from None
        raise BackendError(f"giving up after {self.config.max_retries} retries ({last})")

    def classify(self, prompt: Prompt, example: Example) -> int:
        self._bump("classify_calls")
        return extract_label(self._post(prompt.text, example.text), self.positive, self.negative)

    def complete(self, role_system_prompt: str, user_message: str, role=None, salt=0) -> str:
        self._bump("complete_calls")
        return self._post(role_system_prompt, user_message)

    def close(self):
        self._client.close()


def make_backend(config: BackendConfig, oracle: SimulatedOracle | None = None):
    if config.kind == "simulated":
        if oracle is None:
            raise ContractError("simulated backend needs an oracle")
        return SimulatedBackend(replace(oracle, rng_seed=config.rng_seed), config)
    return HTTPBackend(config)
