"""Render ER pools back into prompt text.

The default synthesizer is template based and fully deterministic. Anything
implementing :class:`Synthesizer` can replace it, e.g. a language-model
backed one; such a synthesizer should re-check that its output still
extracts to the same pool.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol

from .er import ERPool, EntityClass
from .errors import UnknownTemplateSlot

SLOTS = frozenset({"subject", "predicate", "object"})


class Synthesizer(Protocol):
    def render(self, pool: ERPool) -> str: ...


@dataclass(frozen=True)
class TemplateSet:
    triple_template: str = "{subject} {predicate} {object}"
    joiner: str = " and "
    default_article: str = "a"
    vowel_article: str = "an"
    articles: Mapping[str, str] = field(default_factory=dict)
    fallback: str | None = None

    def __post_init__(self) -> None:
        for _, name, _, _ in string.Formatter().parse(self.triple_template):
            if name is not None and name not in SLOTS:
                raise UnknownTemplateSlot(f"template slot {{{name}}} is not one of {sorted(SLOTS)}")

    def article_for(self, label: str) -> str:
        if label in self.articles:
            return self.articles[label]
        return self.vowel_article if label[:1] in "aeiou" else self.default_article

    def mention(self, entity: EntityClass) -> str:
        art = self.article_for(entity.label)
        return f"{art} {entity.label}" if art else entity.label

    @classmethod
    def from_dict(cls, data: Mapping) -> "TemplateSet":
        known = {"triple_template", "joiner", "default_article", "vowel_article", "articles", "fallback"}
        return cls(**{k: v for k, v in data.items() if k in known})


def load_templates(path: str | Path | None = None) -> TemplateSet:
    if path is None:
        text = resources.files("t2imt.data").joinpath("templates_v1.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return TemplateSet.from_dict(json.loads(text))


def render(pool: ERPool, templates: TemplateSet | None = None) -> str:
    """One clause per triple in canonical order, joined by ``templates.joiner``.

    An empty pool renders ``templates.fallback`` if set, else the pool's
    source caption.
    """
    templates = templates or TemplateSet()
    if pool.density == 0:
        return templates.fallback if templates.fallback is not None else pool.source_caption
    clauses = [
        templates.triple_template.format(
            subject=templates.mention(t.subject),
            predicate=t.predicate.label,
            object=templates.mention(t.object),
        )
        for t in pool
    ]
    return templates.joiner.join(clauses)


@dataclass(frozen=True)
class TemplateSynthesizer:
    templates: TemplateSet = field(default_factory=TemplateSet)

    def render(self, pool: ERPool) -> str:
        return render(pool, self.templates)
