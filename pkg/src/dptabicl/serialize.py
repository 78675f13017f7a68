"""Natural-language rendering of DP records and k-shot prompt assembly.

Template files are YAML::

    template_id: blood-gdp
    version: 1
    body: "A blood donor ... The donor has donated blood {frequency} times. ..."
    question: "Did the donor donate blood in March 2007? Yes or No?"
    answer_cue: "Answer:"
    phrasing:            # optional, overrides the schema's phrasing
      sex:
        Male: {text: male, subj: He, poss: His}

``{name}`` substitutes the value of feature ``name``; ``{name:variant}``
picks a named variant from its phrasing entry. The label is not written in
the body: it fills the answer slot after ``answer_cue``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Sequence

import yaml

from .data import Provenance, Record, Schema, format_real, round_half_up
from .errors import RenderError, SchemaError
from .gdp import AggregateRecord

PLACEHOLDER = re.compile(r"\{([^{}:]+)(?::([A-Za-z_][A-Za-z0-9_]*))?\}")
DEMO_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    question: str
    answer_cue: str = "Answer:"
    phrasing: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    version: int = 1

    @property
    def placeholders(self) -> set[str]:
        return {m.group(1) for m in PLACEHOLDER.finditer(self.body)}

    def check(self, schema: Schema) -> None:
        expected = {f.name for f in schema.features}
        found = self.placeholders
        if found != expected:
            missing, extra = sorted(expected - found), sorted(found - expected)
            raise RenderError(
                f"template {self.template_id!r} does not match schema {schema.dataset_id!r}: "
                f"missing placeholders {missing}, unknown placeholders {extra}"
            )

    @classmethod
    def from_config(cls, cfg: Mapping) -> "PromptTemplate":
        try:
            return cls(
                template_id=str(cfg["template_id"]),
                body=" ".join(str(cfg["body"]).split()),
                question=" ".join(str(cfg["question"]).split()),
                answer_cue=str(cfg.get("answer_cue", "Answer:")),
                phrasing={
                    str(f): {str(v): p for v, p in (table or {}).items()}
                    for f, table in (cfg.get("phrasing") or {}).items()
                },
                version=int(cfg.get("version", 1)),
            )
        except KeyError as exc:
            raise SchemaError(f"template config missing key {exc}") from None


def load_template(path) -> PromptTemplate:
    with open(path, encoding="utf-8") as fh:
        return PromptTemplate.from_config(yaml.safe_load(fh))


def builtin_template(name: str) -> PromptTemplate:
    """Load a shipped template, e.g. ``builtin_template("blood-ldp")``."""
    res = resources.files("dptabicl.resources").joinpath("templates", f"{name}.yaml")
    if not res.is_file():
        raise SchemaError(f"no built-in template named {name!r}")
    return PromptTemplate.from_config(yaml.safe_load(res.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Demonstration:
    question: str
    answer: str
    answer_cue: str = "Answer:"

    @property
    def text(self) -> str:
        return f"{self.question} {self.answer_cue} {self.answer}"


@dataclass(frozen=True)
class Prompt:
    demonstrations: tuple[Demonstration, ...]
    query: str
    query_id: Any = None
    # never serialized; lets the mock backend act as an oracle
    query_record: Record | None = None

    @property
    def text(self) -> str:
        return DEMO_SEPARATOR.join([d.text for d in self.demonstrations] + [self.query])


def _phrase(template: PromptTemplate, schema: Schema, name: str, value, variant: str | None) -> str:
    spec = schema.feature(name)
    if not spec.is_categorical:
        if variant is not None:
            raise RenderError(f"numerical feature {name!r} has no phrasing variant {variant!r}")
        if value is None:
            raise RenderError(f"missing value for {name!r}")
        v = float(value)
        return str(round_half_up(v)) if spec.integer else format_real(v)
    value = str(value)
    if value not in spec.domain:
        raise RenderError(f"value {value!r} is not in the domain of {name!r}")
    entry = template.phrasing.get(name, {}).get(value, spec.phrasing.get(value, value))
    if isinstance(entry, Mapping):
        key = variant or "text"
        if key not in entry:
            raise RenderError(f"phrasing for {name}={value} has no variant {key!r}")
        return str(entry[key])
    if variant is not None:
        raise RenderError(f"phrasing for {name}={value} has no variant {variant!r}")
    return str(entry)


def _fill(template: PromptTemplate, schema: Schema, values: Sequence) -> str:
    template.check(schema)
    if len(values) != schema.n_features:
        raise RenderError(f"record has {len(values)} feature values, schema {schema.dataset_id!r} has {schema.n_features}")
    by_name = {f.name: v for f, v in zip(schema.features, values)}
    body = PLACEHOLDER.sub(lambda m: _phrase(template, schema, m.group(1), by_name[m.group(1)], m.group(2)), template.body)
    return f"{body} {template.question}"


def render_demonstration(template: PromptTemplate, record, schema: Schema) -> Demonstration:
    """Render a DP-protected record with its answer.

    Only records sampled from a reconstructed distribution or GDP aggregates
    are accepted.
    """
    if isinstance(record, Record):
        if record.provenance is not Provenance.RECONSTRUCTED_SAMPLED:
            raise RenderError(f"refusing to render a {record.provenance.value} record as a demonstration")
    elif not isinstance(record, AggregateRecord):
        raise RenderError(f"cannot render {type(record).__name__} as a demonstration")
    if record.label is None:
        raise RenderError("demonstration record has no label")
    if str(record.label) not in schema.label.domain:
        raise RenderError(f"label {record.label!r} is not in {list(schema.label.domain)}")
    question = _fill(template, schema, record.values)
    return Demonstration(question, schema.answer_text(record.label), template.answer_cue)


def render_query(template: PromptTemplate, record: Record, schema: Schema) -> str:
    """Question text for a (non-sensitive) query, ending with the answer cue."""
    values = record.values if isinstance(record, Record) else tuple(record)
    return f"{_fill(template, schema, values)} {template.answer_cue}"


def assemble_prompt(demos: Sequence[Demonstration], query: str, query_id=None, query_record=None) -> Prompt:
    return Prompt(tuple(demos), query, query_id, query_record)
