"""Cached 0/1 scoring of prompts on minibatches.

The :class:`EvalCache` memoizes per-example labels keyed by
``(prompt_id, example_id, repeat)`` plus role completions, so replaying a
run against a warm cache never touches the backend.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotator import Prompt
from .dataset import Example
from .exceptions import BackendError, ContractError, EvaluationError, ExtractionError

logger = logging.getLogger(__name__)

DEFAULT_REVERSAL_THRESHOLD = 0.15
CLARIFY_CUES = ("which", "what", "who", "whom", "whose", "where", "when", "how",
                "could you", "can you", "would you", "do you mean", "clarify")


def batch_id(batch: Sequence[Example]) -> str:
    return hashlib.sha256("\n".join(e.id for e in batch).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PredictionVector:
    prompt_id: str
    bits: tuple[int, ...]
    predicted_labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) != len(self.predicted_labels):
            raise ContractError("bits and predicted_labels differ in length")

    def __len__(self):
        return len(self.bits)

    @property
    def array(self):
        return np.asarray(self.bits, dtype=float)

    @property
    def accuracy(self):
        return sum(self.bits) / len(self.bits)


@dataclass(frozen=True)
class Observation:
    prompt: Prompt
    accuracy: float
    n_repeats: int
    prediction_vector: PredictionVector


class EvalCache:
    """Thread-safe memo of backend answers, optionally mirrored to a JSONL file.

    Passes are append-only: a repeat evaluation adds a new pass, the stored
    accuracy of a (prompt, batch) is the mean over its passes.
    """

    def __init__(self, path=None):
        self._lock = threading.RLock()
        self._labels: dict[tuple[str, str, int], int] = {}
        self._passes: dict[tuple[str, str], list[float]] = {}
        self._completions: dict[str, str] = {}
        self.hits = 0
        self.misses = 0
        self.path = Path(path) if path is not None else None

    # persistence -------------------------------------------------------
    @classmethod
    def load(cls, path, append=True):
        cache = cls(path if append else None)
        p = Path(path)
        if p.exists():
            for i, line in enumerate(p.read_text(encoding="utf-8").splitlines()):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    cache._ingest(rec)
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}: corrupt cache record {i}: {exc}") from None
        return cache

    def _ingest(self, rec):
        if rec["kind"] == "pass":
            pid, bid, rep = rec["prompt_id"], rec["batch_id"], int(rec["repeat"])
            for ex_id, label in rec["labels"].items():
                self._labels[(pid, ex_id, rep)] = int(label)
            passes = self._passes.setdefault((pid, bid), [])
            if rep == len(passes):
                passes.append(float(rec["accuracy"]))
        elif rec["kind"] == "completion":
            self._completions[rec["key"]] = rec["text"]
        else:
            raise KeyError(rec["kind"])

    def _append(self, rec):
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")

    # labels ------------------------------------------------------------
    def get_label(self, prompt_id, example_id, repeat):
        with self._lock:
            label = self._labels.get((prompt_id, example_id, repeat))
            if label is None:
                self.misses += 1
            else:
                self.hits += 1
            return label

    def put_label(self, prompt_id, example_id, repeat, label):
        with self._lock:
            self._labels.setdefault((prompt_id, example_id, repeat), int(label))

    def passes(self, prompt_id, bid):
        with self._lock:
            return list(self._passes.get((prompt_id, bid), ()))

    def record_pass(self, prompt_id, bid, repeat, labels: dict, accuracy):
        with self._lock:
            passes = self._passes.setdefault((prompt_id, bid), [])
            if repeat < len(passes):
                return
            if repeat != len(passes):
                raise ContractError("passes must be recorded in order")
            passes.append(float(accuracy))
            self._append({"kind": "pass", "prompt_id": prompt_id, "batch_id": bid,
                          "repeat": repeat, "accuracy": accuracy, "labels": labels})

    # completions -------------------------------------------------------
    @staticmethod
    def completion_key(system, user, role, salt):
        blob = json.dumps([system, user, role, salt], ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def get_completion(self, key):
        with self._lock:
            text = self._completions.get(key)
            if text is None:
                self.misses += 1
            else:
                self.hits += 1
            return text

    def put_completion(self, key, text):
        with self._lock:
            if key not in self._completions:
                self._completions[key] = text
                self._append({"kind": "completion", "key": key, "text": text})

    @property
    def stats(self):
        return {"hits": self.hits, "misses": self.misses}


class Scorer:
    """Cached evaluation front-end over a backend.

    ``backend_calls`` counts only calls that actually reached the backend.
    """

    def __init__(self, backend, cache: EvalCache | None = None, max_workers: int = 1):
        self.backend = backend
        self.cache = cache if cache is not None else EvalCache()
        self.max_workers = max_workers
        self._lock = threading.Lock()
        self.classify_calls = 0
        self.complete_calls = 0

    @property
    def backend_calls(self):
        return {"classify": self.classify_calls, "complete": self.complete_calls}

    def _classify(self, prompt, example, repeat):
        label = self.cache.get_label(prompt.id, example.id, repeat)
        if label is not None:
            return label
        with self._lock:
            self.classify_calls += 1
        try:
            label = int(self.backend.classify(prompt, example))
        except (BackendError, ExtractionError) as exc:
            raise EvaluationError(f"example {example.id}: {exc}", example_id=example.id) from exc
        self.cache.put_label(prompt.id, example.id, repeat, label)
        return label

    def labels(self, prompt: Prompt, batch: Sequence[Example], repeat: int = 0) -> list[int]:
        """Predicted labels of ``prompt`` for one pass over ``batch``."""
        if self.max_workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(self.max_workers) as pool:
                futures = [pool.submit(self._classify, prompt, ex, repeat) for ex in batch]
                labels = [f.result() for f in futures]
        else:
            labels = [self._classify(prompt, ex, repeat) for ex in batch]
        bid = batch_id(batch)
        if repeat >= len(self.cache.passes(prompt.id, bid)):
            acc = float(np.mean([p == e.label for p, e in zip(labels, batch)]))
            self.cache.record_pass(prompt.id, bid, repeat,
                                   {e.id: p for e, p in zip(batch, labels)}, acc)
        return labels

    def predict_vector(self, prompt: Prompt, control: Sequence[Example]) -> PredictionVector:
        if not control:
            raise ContractError("control batch is empty")
        predicted = self.labels(prompt, control)
        bits = tuple(int(p == e.label) for p, e in zip(predicted, control))
        return PredictionVector(prompt.id, bits, tuple(predicted))

    def accuracy(self, prompt: Prompt, batch: Sequence[Example], repeats: int = 1) -> float:
        """Mean accuracy over at least ``repeats`` full passes."""
        return self.evaluate(prompt, batch, repeats)[0]

    def evaluate(self, prompt, batch, repeats=1):
        """Like :meth:`accuracy` but also returns the number of passes averaged."""
        if repeats < 1:
            raise ContractError("repeats must be >= 1")
        if not batch:
            raise ContractError("batch is empty")
        bid = batch_id(batch)
        for r in range(len(self.cache.passes(prompt.id, bid)), repeats):
            self.labels(prompt, batch, repeat=r)
        passes = self.cache.passes(prompt.id, bid)
        return float(np.mean(passes)), len(passes)

    def complete(self, system, user, role=None, salt=0) -> str:
        key = EvalCache.completion_key(system, user, role, salt)
        text = self.cache.get_completion(key)
        if text is not None:
            return text
        with self._lock:
            self.complete_calls += 1
        text = self.backend.complete(system, user, role=role, salt=salt)
        self.cache.put_completion(key, text)
        return text


def reversal_stats(candidate: PredictionVector, reference: PredictionVector):
    """Return (accuracy, flipped accuracy, disagreement with reference)."""
    if len(candidate) != len(reference):
        raise ContractError("prediction vectors cover different control batches")
    acc = candidate.accuracy
    disagree = float(np.mean(np.asarray(candidate.predicted_labels)
                             != np.asarray(reference.predicted_labels)))
    return acc, 1.0 - acc, disagree


def detect_label_reversal(candidate: PredictionVector, reference: PredictionVector,
                          threshold: float = DEFAULT_REVERSAL_THRESHOLD) -> bool:
    """Flag prompts that look like they answer with swapped labels.

    Complementing every predicted label turns each error into a hit, so the
    flipped accuracy is ``1 - acc``. A prompt is flagged only when flipping
    helps by more than ``threshold`` and it disagrees with the reference on
    most control items; merely weak prompts tend to agree with the reference.
    """
    acc, flipped, disagree = reversal_stats(candidate, reference)
    return bool(flipped - acc > threshold and disagree > 0.5)


def is_clarifying(response: str, cues=CLARIFY_CUES) -> bool:
    text = response.strip()
    if not text.endswith("?"):
        return False
    lowered = text.lower()
    return any(re.search(r"\b" + re.escape(cue) + r"\b", lowered) for cue in cues)


def clarification_score(prompt: Prompt, queries: Sequence[str], scorer: Scorer, cues=CLARIFY_CUES) -> float:
    """Fraction of ambiguous queries whose first reply asks a clarifying question."""
    if not queries:
        raise ContractError("queries must be non-empty")
    hits = [is_clarifying(scorer.complete(prompt.text, q, role="chat"), cues) for q in queries]
    return sum(hits) / len(hits)


class ClarificationBackend:
    """Adapter scoring a query as "correct" when the reply asks for clarification.

    Query examples carry label 1, so classify returns 1 exactly when the
    first turn is a clarifying question and the rest of the pipeline runs
    unchanged.
    """

    def __init__(self, backend, cues=CLARIFY_CUES):
        self.backend = backend
        self.cues = cues

    def classify(self, prompt: Prompt, example: Example) -> int:
        reply = self.backend.complete(prompt.text, example.text, role="chat")
        return int(is_clarifying(reply, self.cues))

    def complete(self, role_system_prompt, user_message, role=None, salt=0):
        return self.backend.complete(role_system_prompt, user_message, role=role, salt=salt)
