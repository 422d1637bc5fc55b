"""Labeled corpora: LIAR/ETHOS parsing and control/eval/test partitioning.

LIAR's six truthfulness grades are expected to be collapsed to a binary
label before the file reaches :func:`parse_liar` (e.g. ``pants-fire``,
``false``, ``barely-true`` -> 1 for "lie", the rest -> 0). The parser only
accepts labels that are already 0 or 1.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DataValidationError, ParseError, PartitionError

ETHOS_THRESHOLD = 0.5


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    label: int

    def __post_init__(self):
        if isinstance(self.label, bool) or self.label not in (0, 1):
            raise DataValidationError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class Partition:
    control: tuple[Example, ...]
    eval: tuple[Example, ...]
    test: tuple[Example, ...]
    rng_seed: int
    stratified: bool = field(default=True)

    def manifest(self) -> dict:
        return {
            "version": 1,
            "rng_seed": self.rng_seed,
            "stratified": self.stratified,
            "control": [e.id for e in self.control],
            "eval": [e.id for e in self.eval],
            "test": [e.id for e in self.test],
        }

    def manifest_hash(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _iter_lines(source) -> Iterable[tuple[int, str]]:
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    elif isinstance(source, str):
        source = io.StringIO(source)
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, (bytes, bytearray)):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ParseError(f"invalid UTF-8: {exc}", lineno) from None
        line = raw.rstrip("\r\n")
        if line.strip():
            yield lineno, line


def parse_liar(source, id_prefix="liar-") -> list[Example]:
    """Parse line-delimited ``{"label": int, "text": str}`` records.

    ``source`` may be a binary or text stream, ``bytes`` or ``str``. Records
    carrying an ``id`` field keep it; otherwise the id is the record index.
    """
    out = []
    for lineno, line in _iter_lines(source):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed record: {exc.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", lineno)
        label, text = rec.get("label"), rec.get("text")
        if not isinstance(label, int) or isinstance(label, bool):
            raise ParseError("field 'label' must be an integer", lineno)
        if not isinstance(text, str):
            raise ParseError("field 'text' must be a string", lineno)
        if label not in (0, 1):
            raise DataValidationError(f"line {lineno}: label {label} not in {{0, 1}}")
        ex_id = str(rec["id"]) if "id" in rec else f"{id_prefix}{len(out)}"
        out.append(Example(ex_id, text, label))
    _check_unique(out)
    return out


def parse_ethos(source, id_prefix="ethos-", threshold=ETHOS_THRESHOLD) -> list[Example]:
    """Parse ``text;score`` lines, splitting on the last ``;``.

    Scores at or above ``threshold`` are hate speech (label 1).
    """
    out = []
    for lineno, line in _iter_lines(source):
        text, sep, score = line.rpartition(";")
        if not sep:
            raise ParseError("missing ';' separator", lineno)
        try:
            value = float(score)
        except ValueError:
            raise ParseError(f"non-numeric score {score!r}", lineno) from None
        if value != value:
            raise ParseError("score is NaN", lineno)
        out.append(Example(f"{id_prefix}{len(out)}", text, int(value >= threshold)))
    return out


def dump_liar(examples: Sequence[Example], with_ids=False) -> str:
    lines = []
    for ex in examples:
        rec = {"label": ex.label, "text": ex.text}
        if with_ids:
            rec["id"] = ex.id
        lines.append(json.dumps(rec, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def dump_ethos(examples: Sequence[Example]) -> str:
    return "".join(f"{ex.text};{float(ex.label)}\n" for ex in examples)


def parse_queries(source, id_prefix="query-") -> list[Example]:
    """One ambiguous query per line; the target behavior (clarify) is label 1."""
    return [Example(f"{id_prefix}{i}", line.strip(), 1)
            for i, (_, line) in enumerate(_iter_lines(source))]


def load_examples(path, fmt: str) -> list[Example]:
    parsers = {"liar": parse_liar, "ethos": parse_ethos, "clarification": parse_queries}
    if fmt not in parsers:
        raise DataValidationError(f"unknown dataset format {fmt!r}")
    with open(path, "rb") as fh:
        return parsers[fmt](fh)


def _check_unique(examples):
    seen = set()
    for ex in examples:
        if ex.id in seen:
            raise DataValidationError(f"duplicate example id {ex.id!r}")
        seen.add(ex.id)


def stratified_counts(class_sizes: Sequence[int], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` across classes."""
    n = sum(class_sizes)
    exact = [total * c / n for c in class_sizes]
    counts = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def partition(examples: Sequence[Example], control_size: int, eval_size: int,
              rng_seed: int, stratify: bool = True) -> Partition:
    """Split into a label-stratified control batch, a uniform eval batch and a test set.

    All three keep the dataset's original ordering, so the control batch
    ordering is stable for a given seed.
    """
    examples = list(examples)
    _check_unique(examples)
    if control_size < 1 or eval_size < 1:
        raise PartitionError("control_size and eval_size must be positive")
    if control_size + eval_size > len(examples):
        raise PartitionError(
            f"need {control_size + eval_size} examples, dataset has {len(examples)}")
    rng = np.random.default_rng(rng_seed)
    if stratify:
        labels = sorted({e.label for e in examples})
        if len(labels) < 2:
            raise PartitionError("stratification needs both classes present")
        by_class = [[i for i, e in enumerate(examples) if e.label == lab] for lab in labels]
        counts = stratified_counts([len(c) for c in by_class], control_size)
        control_idx = []
        for members, k in zip(by_class, counts):
            control_idx.extend(rng.permutation(members)[:k].tolist())
    else:
        control_idx = rng.permutation(len(examples))[:control_size].tolist()
    chosen = set(control_idx)
    rest = [i for i in range(len(examples)) if i not in chosen]
    eval_idx = set(rng.permutation(rest)[:eval_size].tolist())
    control = tuple(examples[i] for i in sorted(chosen))
    eval_ = tuple(examples[i] for i in sorted(eval_idx))
    test = tuple(examples[i] for i in rest if i not in eval_idx)
    return Partition(control, eval_, test, rng_seed, stratify)


def save_manifest(part: Partition, path) -> str:
    """Write the partition manifest; returns its content hash."""
    Path(path).write_text(json.dumps(part.manifest(), indent=1, sort_keys=True) + "\n")
    return part.manifest_hash()


def load_manifest(path, examples: Sequence[Example]) -> Partition:
    data = json.loads(Path(path).read_text())
    index = {e.id: e for e in examples}
    try:
        pick = lambda key: tuple(index[i] for i in data[key])  # noqa: E731
        return Partition(pick("control"), pick("eval"), pick("test"),
                         int(data["rng_seed"]), bool(data.get("stratified", True)))
    except KeyError as exc:
        raise DataValidationError(f"manifest references unknown id or key {exc}") from None
