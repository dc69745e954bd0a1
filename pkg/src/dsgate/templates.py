"""Query templates with ``$name$`` bind variables.

A template is a provider-native query string in which ``$name$`` marks a
placeholder to be filled from request parameters. ``$$`` escapes one literal
dollar sign. Scanning is a single greedy left-to-right pass, so a template
has exactly one reading.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import (
    IllegalName,
    MissingParameter,
    TemplateMismatch,
    TypeMismatch,
    UnbalancedDelimiter,
    UndeclaredParameter,
)

IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

TYPE_HINTS = ("string", "integer", "decimal", "boolean")

_INTEGER_RE = re.compile(r"[+-]?[0-9]+")
_DECIMAL_RE = re.compile(r"[+-]?([0-9]+(\.[0-9]*)?|\.[0-9]+)([eE][+-]?[0-9]+)?")
_BOOLEAN_VALUES = frozenset({"true", "false", "0", "1"})

RAW = "raw"
SQL_QUOTED = "sql-quoted"


@dataclass(frozen=True)
class BindVariable:
    """Descriptor for one ``$name$`` placeholder.

    ``default`` may be present only on optional variables; optional variables
    without a default are rejected because silently substituting an empty
    string corrupts queries.
    """

    name: str
    required: bool = True
    default: str | None = None
    type_hint: str = "string"

    def __post_init__(self) -> None:
        if not IDENTIFIER_RE.fullmatch(self.name):
            raise IllegalName(f"illegal bind variable name: {self.name!r}")
        if self.type_hint not in TYPE_HINTS:
            raise TypeMismatch(f"unknown type hint: {self.type_hint!r}")
        if self.required and self.default is not None:
            raise TemplateMismatch(
                f"required variable {self.name!r} must not declare a default"
            )
        if not self.required and self.default is None:
            raise TemplateMismatch(
                f"optional variable {self.name!r} must declare a default"
            )


@dataclass(frozen=True)
class QueryTemplate:
    """A provider-native query string plus its bind variable descriptors."""

    text: str = ""
    bind_variables: tuple[BindVariable, ...] = ()

    def __post_init__(self) -> None:
        declared = [bv.name for bv in self.bind_variables]
        if len(set(declared)) != len(declared):
            raise TemplateMismatch(f"duplicate bind variable declarations: {declared}")
        extracted = extract_bind_variables(self.text)
        if set(extracted) != set(declared):
            raise TemplateMismatch(
                f"template references {extracted} but declares {sorted(declared)}"
            )

    def variable(self, name: str) -> BindVariable:
        for bv in self.bind_variables:
            if bv.name == name:
                return bv
        raise KeyError(name)


@dataclass(frozen=True)
class BoundQuery:
    """A template after substitution, ready for a provider to execute."""

    text: str
    applied_params: dict[str, str] = field(default_factory=dict)
    provider_language: str = ""


def _scan(text: str):
    """Yield (kind, value) tokens: ("lit", chars), ("esc", "$"), ("var", name)."""
    i, n = 0, len(text)
    lit_start = i
    while i < n:
        if text[i] != "$":
            i += 1
            continue
        if i > lit_start:
            yield ("lit", text[lit_start:i])
        if i + 1 < n and text[i + 1] == "$":
            yield ("esc", "$")
            i += 2
            lit_start = i
            continue
        close = text.find("$", i + 1)
        if close == -1:
            raise UnbalancedDelimiter(
                f"unclosed '$' at offset {i} in template: {text!r}"
            )
        name = text[i + 1 : close]
        if not IDENTIFIER_RE.fullmatch(name):
            raise IllegalName(
                f"illegal placeholder name {name!r} at offset {i} in template"
            )
        yield ("var", name)
        i = close + 1
        lit_start = i
    if i > lit_start:
        yield ("lit", text[lit_start:i])


def extract_bind_variables(template_text: str) -> list[str]:
    """Return distinct placeholder names in first-occurrence order."""
    names: list[str] = []
    seen: set[str] = set()
    for kind, value in _scan(template_text):
        if kind == "var" and value not in seen:
            names.append(value)
            seen.add(value)
    return names


def _render_sql_quoted(value: str, type_hint: str) -> str:
    if type_hint == "string":
        return "'" + value.replace("'", "''") + "'"
    if type_hint == "integer":
        if not _INTEGER_RE.fullmatch(value):
            raise TypeMismatch(f"not an integer: {value!r}")
        return value
    if type_hint == "decimal":
        if not _DECIMAL_RE.fullmatch(value):
            raise TypeMismatch(f"not a decimal: {value!r}")
        return value
    if type_hint == "boolean":
        if value.lower() not in _BOOLEAN_VALUES:
            raise TypeMismatch(f"not a boolean: {value!r}")
        return value
    raise TypeMismatch(f"unknown type hint: {type_hint!r}")


def substitute(
    template: QueryTemplate,
    params: dict[str, str],
    mode: str = RAW,
    provider_language: str = "",
) -> BoundQuery:
    """Fill a template's placeholders from ``params``.

    In ``sql-quoted`` mode string values are single-quoted with embedded
    quotes doubled and numeric/boolean values are validated then inserted
    bare; ``raw`` mode inserts every value verbatim. ``$$`` always becomes
    one ``$``.
    """
    if mode not in (RAW, SQL_QUOTED):
        raise ValueError(f"unknown substitution mode: {mode!r}")

    declared = {bv.name: bv for bv in template.bind_variables}
    for name in params:
        if name not in declared:
            raise UndeclaredParameter(name)

    values: dict[str, str] = {}
    for name, bv in declared.items():
        if name in params:
            values[name] = params[name]
        elif bv.default is not None:
            values[name] = bv.default
        elif bv.required:
            raise MissingParameter(name)
        else:
            # Unreachable for model-validated templates; fail loud anyway.
            raise MissingParameter(name)

    out: list[str] = []
    applied: dict[str, str] = {}
    for kind, value in _scan(template.text):
        if kind == "lit":
            out.append(value)
        elif kind == "esc":
            out.append("$")
        else:
            bv = declared.get(value)
            if bv is None:
                raise TemplateMismatch(
                    f"template references undeclared variable {value!r}"
                )
            raw_value = values[value]
            applied[value] = raw_value
            if mode == SQL_QUOTED:
                out.append(_render_sql_quoted(raw_value, bv.type_hint))
            else:
                out.append(raw_value)

    return BoundQuery(
        text="".join(out),
        applied_params=applied,
        provider_language=provider_language,
    )
