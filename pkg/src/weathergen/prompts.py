"""Prompt chain: sampled class -> composed scene prompt -> enriched description.

The class comes from a :class:`~weathergen.sampler.PlanItem`; this module
renders the scene template around it and then asks a text backend (or the
offline descriptor bank) for weather and lighting detail.
"""
from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .backends import DescriptorRequest, TextBackend
from .errors import BackendUnavailable, EmptyCompletion, ParseError, ValidationError
from .retry import RetryPolicy, call_with_retry
from .sampler import PlanItem

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 60
DEFAULT_PATTERN = "A photo of {identifier} {scene_noun}, {cls}, {weather}, {time}"
BARE_PATTERN = "A photo of {cls}, {weather}, {time}"

SOURCE_LLM = "llm"
SOURCE_BANK = "fallback_bank"


@dataclass(frozen=True)
class PromptTemplate:
    identifier_token: str = "V*"
    scene_noun: str = "driving scene"
    pattern: str = DEFAULT_PATTERN
    include_identifier: bool = True

    def __post_init__(self):
        if not self.identifier_token or any(ch.isspace() for ch in self.identifier_token):
            raise ValidationError(f"identifier token must be one non-empty word, got {self.identifier_token!r}")
        if not self.scene_noun.strip():
            raise ValidationError("scene_noun must be non-empty")
        for slot in ("{cls}", "{weather}", "{time}"):
            if slot not in self.pattern:
                raise ValidationError(f"pattern is missing the {slot} slot")
        try:
            self.pattern.format(identifier="x", scene_noun="x", cls="x", weather="x", time="x")
        except (KeyError, IndexError, ValueError) as exc:
            raise ValidationError(f"bad pattern {self.pattern!r}: {exc!r}") from exc

    @classmethod
    def from_dict(cls, doc: Mapping) -> PromptTemplate:
        known = {"identifier_token", "scene_noun", "pattern", "include_identifier"}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown template fields: {sorted(unknown)}")
        return cls(**doc)

    def render(self, cls: str, weather: str, time: str) -> str:
        pattern = self.pattern
        if not self.include_identifier and pattern == DEFAULT_PATTERN:
            pattern = BARE_PATTERN
        text = pattern.format(
            identifier=self.identifier_token if self.include_identifier else "",
            scene_noun=self.scene_noun,
            cls=cls,
            weather=weather,
            time=time,
        )
        return " ".join(text.split())


@dataclass(frozen=True)
class BasePrompt:
    text: str
    class_name: str
    weather: str
    time: str


@dataclass(frozen=True)
class EnrichedPrompt:
    text: str
    base: BasePrompt
    source: str
    word_count: int


@dataclass(frozen=True)
class PromptSpec:
    index: int
    class_name: str
    weather: str
    time: str
    derived_seed: int
    base_text: str
    enriched_text: str
    source: str


def compose_scene(class_name: str, weather: str, time: str, tmpl: PromptTemplate | None = None) -> BasePrompt:
    """Render the scene template for one (class, weather, time) triple."""
    tmpl = tmpl or PromptTemplate()
    for slot, value in (("class", class_name), ("weather", weather), ("time", time)):
        if not isinstance(value, str) or not value.strip():
            raise ValidationError(f"empty {slot} slot")
    return BasePrompt(tmpl.render(class_name, weather, time), class_name, weather, time)


class DescriptorBank:
    """Hand-written weather/lighting fragments per (weather, time) cell.

    Selection is ``fragments[seed % len(fragments)]``, so a given derived seed
    always yields the same fragment.
    """

    def __init__(self, cells: Mapping[tuple[str, str], list[str]]):
        self.cells = {k: tuple(v) for k, v in cells.items()}
        for key, frags in self.cells.items():
            if not frags or any(not f.strip() for f in frags):
                raise ValidationError(f"descriptor list for {key} is empty or has blank entries")

    @classmethod
    def from_dict(cls, doc: Mapping, where: str = "<bank>") -> DescriptorBank:
        cells = {}
        try:
            for weather, by_time in doc.items():
                for time, frags in by_time.items():
                    if not isinstance(frags, list) or not all(isinstance(f, str) for f in frags):
                        raise ParseError(f"{weather}/{time}: expected a list of strings", where)
                    cells[(weather, time)] = frags
        except AttributeError as exc:
            raise ParseError("expected {weather: {time: [fragments]}}", where) from exc
        return cls(cells)

    @classmethod
    def load(cls, path: str | Path) -> DescriptorBank:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
        return cls.from_dict(doc, str(path))

    @classmethod
    def default(cls) -> DescriptorBank:
        text = resources.files("weathergen.data").joinpath("descriptors.json").read_text("utf-8")
        return cls.from_dict(json.loads(text), "descriptors.json")

    def covers(self, weather: str, time: str) -> bool:
        return (weather, time) in self.cells

    def pick(self, weather: str, time: str, seed: int) -> str:
        try:
            frags = self.cells[(weather, time)]
        except KeyError:
            raise ValidationError(f"descriptor bank has no entries for ({weather}, {time})") from None
        return frags[seed % len(frags)]


def default_instruction() -> str:
    return resources.files("weathergen.data").joinpath("descriptor_instruction.txt").read_text("utf-8")


def contains_word(text: str, phrase: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", text) is not None


def fit_budget(text: str, class_name: str, budget: int) -> str:
    """Normalize whitespace, cut to ``budget`` words, and make sure ``class_name`` survives.

    A text missing the class name gets it appended, after trimming enough
    words to stay within budget.
    """
    words = text.strip().strip("\"'").split()
    if not words:
        raise EmptyCompletion("nothing left after normalizing the completion")
    cls_words = class_name.split()
    if budget < len(cls_words):
        raise ValidationError(f"word budget {budget} cannot hold class name {class_name!r}")
    clipped = " ".join(words[:budget])
    if contains_word(clipped, class_name):
        return clipped
    keep = " ".join(words[: budget - len(cls_words)]).rstrip(",;:. ")
    return f"{keep}, {class_name}" if keep else class_name


def enrich(
    base: BasePrompt,
    backend: TextBackend | DescriptorBank,
    budget: int = DEFAULT_BUDGET,
    *,
    seed: int = 0,
    instruction: str | None = None,
    temperature: float = 0.7,
    policy: RetryPolicy = RetryPolicy(),
) -> EnrichedPrompt:
    """Add weather and lighting detail to a composed prompt.

    With a :class:`DescriptorBank` the result is ``base.text`` plus the
    fragment chosen by ``seed``. Any other backend is sent the base prompt and
    the standing instruction; its reply is used as the prompt.
    """
    if budget < 1:
        raise ValidationError("word budget must be positive")
    if isinstance(backend, DescriptorBank):
        raw = f"{base.text}, {backend.pick(base.weather, base.time, seed)}"
        source = SOURCE_BANK
    else:
        req = DescriptorRequest(
            (instruction or default_instruction()).replace("{budget}", str(budget)),
            base.text,
            temperature=temperature,
            # generous token cap; the word budget is enforced below
            max_tokens=max(16, budget * 2),
        )
        raw, _ = call_with_retry(lambda: backend.complete(req), policy, "text completion")
        if not raw.strip():
            raise EmptyCompletion("backend returned an empty completion")
        source = SOURCE_LLM
    text = fit_budget(raw, base.class_name, budget)
    return EnrichedPrompt(text, base, source, len(text.split()))


def generate_prompt(
    item: PlanItem,
    tmpl: PromptTemplate,
    backend: TextBackend | DescriptorBank,
    budget: int = DEFAULT_BUDGET,
    *,
    fallback: DescriptorBank | None = None,
    **enrich_kw,
) -> PromptSpec:
    """Compose then enrich the prompt for one plan item.

    When ``fallback`` is given, a backend that stays unreachable after its
    retries is replaced by the bank for this item and a warning is logged.
    """
    base = compose_scene(item.class_name, item.weather, item.time, tmpl)
    try:
        enriched = enrich(base, backend, budget, seed=item.derived_seed, **enrich_kw)
    except BackendUnavailable as exc:
        if fallback is None:
            raise
        log.warning("item %d: text backend unavailable (%s); using descriptor bank", item.index, exc)
        enriched = enrich(base, fallback, budget, seed=item.derived_seed)
    return PromptSpec(
        item.index, item.class_name, item.weather, item.time, item.derived_seed,
        base.text, enriched.text, enriched.source,
    )
