"""Candidate generation from seed prompts.

Each seed goes through a cascade of three LLM roles: a critic that explains
the seed's errors (``gradient``), an editor that rewrites the seed to address
one critique (``edit``), and a paraphraser that produces local variations of
each edit (``paraphrase``). Role meta-prompts are plain templates with
``{prompt}``, ``{errors}`` and ``{critique}`` slots and can be loaded from a
TOML or JSON file.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .annotator import Prompt
from .dataset import Example
from .exceptions import (BackendError, ConfigError, ContractError, EditError,
                         ExpansionError, ExpansionExhausted)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoleTemplate:
    system: str
    user: str

    def render(self, **slots):
        text = self.user
        for name, value in slots.items():
            text = text.replace("{" + name + "}", value)
        return text


DEFAULT_TEMPLATES = {
    "gradient": RoleTemplate(
        system="You diagnose why an instruction for a text classifier fails.",
        user=("I'm trying to write a zero-shot classifier prompt.\n\n"
              "My current prompt is:\n<prompt>{prompt}</prompt>\n\n"
              "But this prompt gets the following examples wrong:\n{errors}\n\n"
              "Give one reason why the prompt could have gotten these examples wrong. "
              "Answer in one or two sentences."),
    ),
    "edit": RoleTemplate(
        system="You rewrite instructions for a text classifier.",
        user=("I'm trying to write a zero-shot classifier prompt.\n\n"
              "My current prompt is:\n<prompt>{prompt}</prompt>\n\n"
              "It gets these examples wrong:\n{errors}\n\n"
              "The problem with this prompt is that <critique>{critique}</critique>\n\n"
              "Write one improved prompt that fixes the problem. "
              "Reply with the new prompt only."),
    ),
    "paraphrase": RoleTemplate(
        system="You paraphrase instructions without changing their meaning.",
        user=("Generate a variation of the following instruction while keeping the "
              "semantic meaning.\n\nInput: <prompt>{prompt}</prompt>\n\n"
              "Reply with the new instruction only."),
    ),
}
REQUIRED_SLOTS = {"gradient": ("{prompt}", "{errors}"), "edit": ("{prompt}", "{critique}"),
                  "paraphrase": ("{prompt}",)}


def load_templates(path) -> dict[str, RoleTemplate]:
    """Read named ``gradient``/``edit``/``paraphrase`` templates; missing ones keep defaults."""
    raw = Path(path).read_bytes()
    if str(path).endswith(".json"):
        data = json.loads(raw)
    else:
        from ._toml import loads
        data = loads(raw.decode("utf-8"))
    templates = dict(DEFAULT_TEMPLATES)
    for name, entry in data.items():
        if name not in REQUIRED_SLOTS:
            raise ConfigError("unknown role template", key=name)
        extra = set(entry) - {"system", "user"}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", key=name)
        tpl = RoleTemplate(entry.get("system", DEFAULT_TEMPLATES[name].system),
                           entry.get("user", DEFAULT_TEMPLATES[name].user))
        for slot in REQUIRED_SLOTS[name]:
            if slot not in tpl.user:
                raise ConfigError(f"template lacks {slot} slot", key=f"{name}.user")
        templates[name] = tpl
    return templates


@dataclass(frozen=True)
class ExpansionConfig:
    n_gradients: int = 4
    steps_per_gradient: int = 1
    mc_per_edit: int = 2
    n_seeds: int = 3
    errors_per_gradient: int = 1
    max_error_chars: int = 400

    def __post_init__(self):
        for name in ("n_gradients", "steps_per_gradient", "mc_per_edit", "n_seeds",
                     "errors_per_gradient", "max_error_chars"):
            if getattr(self, name) < 1:
                raise ContractError(f"expansion.{name} must be >= 1")

    @property
    def max_candidates_per_seed(self):
        return self.n_gradients * self.steps_per_gradient * (1 + self.mc_per_edit)


@dataclass(frozen=True)
class ErrorItem:
    example: Example
    predicted: int
    true: int


@dataclass(frozen=True)
class ErrorSet:
    prompt_id: str
    items: tuple[ErrorItem, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.items)


def collect_errors(prompt: Prompt, eval_batch: Sequence[Example], scorer) -> ErrorSet:
    if not eval_batch:
        raise ContractError("eval batch is empty")
    predicted = scorer.labels(prompt, eval_batch)
    items = tuple(ErrorItem(ex, p, ex.label) for ex, p in zip(eval_batch, predicted)
                  if p != ex.label)
    return ErrorSet(prompt.id, items)


def stride_indices(n_errors, n_gradients, per_gradient=1):
    """Spread ``n_gradients * per_gradient`` picks evenly over the error list."""
    picks = n_gradients * per_gradient
    stride = max(1, math.ceil(n_errors / picks))
    flat = [(k * stride) % n_errors for k in range(picks)]
    return [flat[i * per_gradient:(i + 1) * per_gradient] for i in range(n_gradients)]


def format_errors(items: Sequence[ErrorItem], max_chars: int) -> str:
    blocks = []
    for item in items:
        text = item.example.text
        if len(text) > max_chars:
            text = text[:max_chars] + "..."
        blocks.append(f"Text: {text}\nLabel: {item.true}\nPrediction: {item.predicted}")
    return "\n\n".join(blocks)


def gradients(seed: Prompt, errors: ErrorSet, cfg: ExpansionConfig, scorer,
              templates=DEFAULT_TEMPLATES) -> list[str]:
    """Ask the critic role for up to ``n_gradients`` textual critiques."""
    if not errors.items:
        return []
    tpl = templates["gradient"]
    critiques, failures = [], 0
    for i, idx in enumerate(stride_indices(len(errors), cfg.n_gradients, cfg.errors_per_gradient)):
        shown = format_errors([errors.items[j] for j in idx], cfg.max_error_chars)
        try:
            text = scorer.complete(tpl.system, tpl.render(prompt=seed.text, errors=shown),
                                   role="gradient", salt=i).strip()
        except BackendError as exc:
            failures += 1
            logger.warning("gradient call %d for %s failed: %s", i, seed.id, exc)
            continue
        if text:
            critiques.append(text)
    if failures == cfg.n_gradients:
        raise ExpansionError(f"every gradient call failed for seed {seed.id}")
    return critiques


_PROMPT_TAG = re.compile(r"<prompt>(.*?)</prompt>", re.DOTALL)


def _clean(response):
    m = _PROMPT_TAG.search(response)
    return (m.group(1) if m else response).strip()


def apply_edit(seed: Prompt, critique: str, errors: ErrorSet, scorer, cfg=ExpansionConfig(),
               templates=DEFAULT_TEMPLATES, salt=0) -> Prompt:
    if not critique.strip():
        raise ContractError("critique is empty")
    tpl = templates["edit"]
    shown = format_errors(errors.items[: cfg.errors_per_gradient], cfg.max_error_chars)
    text = _clean(scorer.complete(tpl.system, tpl.render(prompt=seed.text, errors=shown, critique=critique),
                                  role="edit", salt=salt))
    if not text:
        raise EditError("editor returned an empty prompt")
    return Prompt(text, origin="gradient_edit", parent_id=seed.id)


def mc_paraphrase(prompt: Prompt, count: int, scorer, templates=DEFAULT_TEMPLATES,
                  salt_offset=0) -> list[Prompt]:
    if count < 1:
        raise ContractError("count must be >= 1")
    tpl = templates["paraphrase"]
    out = []
    for j in range(count):
        try:
            text = _clean(scorer.complete(tpl.system, tpl.render(prompt=prompt.text),
                                          role="paraphrase", salt=salt_offset + j))
        except BackendError as exc:
            logger.warning("paraphrase call failed for %s: %s", prompt.id, exc)
            continue
        if text:
            out.append(Prompt(text, origin="mc_paraphrase", parent_id=prompt.id))
    return out


def expand(seeds: Sequence[Prompt], eval_batch: Sequence[Example], cfg: ExpansionConfig, scorer,
           templates=DEFAULT_TEMPLATES, exclude_ids=()) -> list[Prompt]:
    """Build the candidate set from ``seeds``.

    The result is ordered by generation, free of duplicates, and never
    contains a seed or any id listed in ``exclude_ids``.
    """
    if not seeds:
        raise ContractError("no seeds to expand")
    banned = set(exclude_ids) | {s.id for s in seeds}
    out, seen = [], set()

    def add(p):
        if p.id not in banned and p.id not in seen:
            seen.add(p.id)
            out.append(p)

    for seed in seeds:
        errors = collect_errors(seed, eval_batch, scorer)
        critiques = gradients(seed, errors, cfg, scorer, templates)
        if not critiques:
            for p in mc_paraphrase(seed, cfg.mc_per_edit, scorer, templates):
                add(p)
            continue
        for critique in critiques:
            for step in range(cfg.steps_per_gradient):
                try:
                    edited = apply_edit(seed, critique, errors, scorer, cfg, templates, salt=step)
                except (EditError, BackendError) as exc:
                    logger.warning("edit discarded for %s: %s", seed.id, exc)
                    continue
                add(edited)
                for p in mc_paraphrase(edited, cfg.mc_per_edit, scorer, templates):
                    add(p)
    if not out:
        raise ExpansionExhausted("expansion produced no new candidates")
    return out
