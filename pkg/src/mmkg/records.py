"""Tuple-delimited extraction records emitted by the extraction prompts.

A reply looks like::

    ("entity"<|>"GIRL"<|>"person"<|>"Wearing glasses")##
    ("relationship"<|>"GIRL"<|>"PHONE"<|>"holds it"<|>8)##<|COMPLETE|>

The parser is total: anything it cannot read becomes a diagnostic string.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

from .errors import ValidationError


@dataclass(frozen=True)
class RecordGrammar:
    tuple_delimiter: str = "<|>"
    record_delimiter: str = "##"
    completion_delimiter: str = "<|COMPLETE|>"

    def __post_init__(self) -> None:
        delims = [self.tuple_delimiter, self.record_delimiter, self.completion_delimiter]
        if any(not d for d in delims):
            raise ValidationError("record grammar delimiters must be nonempty")
        for i, a in enumerate(delims):
            for j, b in enumerate(delims):
                if i != j and a in b:
                    raise ValidationError(f"delimiter {a!r} is contained in {b!r}")

    def bindings(self) -> dict[str, str]:
        return {
            "tuple_delimiter": self.tuple_delimiter,
            "record_delimiter": self.record_delimiter,
            "completion_delimiter": self.completion_delimiter,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> RecordGrammar:
        return cls(**{k: raw[k] for k in ("tuple_delimiter", "record_delimiter", "completion_delimiter") if k in raw})


@dataclass(frozen=True)
class EntityRecord:
    name: str
    entity_type: str
    description: str

    kind = "entity"


@dataclass(frozen=True)
class RelationshipRecord:
    source: str
    target: str
    description: str
    strength: float

    kind = "relationship"


ExtractionRecord = Union[EntityRecord, RelationshipRecord]


def _unquote(field: str) -> str:
    field = field.strip()
    if len(field) >= 2 and field[0] == field[-1] and field[0] in "\"'":
        return field[1:-1]
    return field


def _format_strength(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def parse_records(
    text: str | bytes, grammar: RecordGrammar = RecordGrammar()
) -> tuple[list[ExtractionRecord], list[str]]:
    """Parse a model reply into records plus diagnostics; never raises."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    records: list[ExtractionRecord] = []
    diags: list[str] = []
    cut = text.find(grammar.completion_delimiter)
    if cut >= 0:
        text = text[:cut]
    for idx, raw in enumerate(text.split(grammar.record_delimiter)):
        chunk = raw.strip()
        if not chunk:
            continue
        lo, hi = chunk.find("("), chunk.rfind(")")
        if lo < 0 or hi <= lo:
            diags.append(f"record {idx}: no parenthesised tuple in {chunk[:60]!r}")
            continue
        fields = [_unquote(f) for f in chunk[lo + 1 : hi].split(grammar.tuple_delimiter)]
        kind = fields[0].strip().lower()
        if kind == "entity":
            if len(fields) != 4:
                diags.append(f"record {idx}: entity needs 4 fields, got {len(fields)}")
                continue
            if not fields[1].strip():
                diags.append(f"record {idx}: entity name is empty")
                continue
            records.append(EntityRecord(fields[1], fields[2], fields[3]))
        elif kind == "relationship":
            if len(fields) != 5:
                diags.append(f"record {idx}: relationship needs 5 fields, got {len(fields)}")
                continue
            if not fields[1].strip() or not fields[2].strip():
                diags.append(f"record {idx}: relationship endpoint is empty")
                continue
            try:
                strength = float(fields[4].strip())
            except ValueError:
                diags.append(f"record {idx}: strength {fields[4]!r} is not a number")
                continue
            if not math.isfinite(strength) or not 1.0 <= strength <= 10.0:
                diags.append(f"record {idx}: strength {strength} outside [1, 10]")
                continue
            records.append(RelationshipRecord(fields[1], fields[2], fields[3], strength))
        else:
            diags.append(f"record {idx}: unknown record kind {fields[0][:30]!r}")
    if not records:
        diags.append("no records")
    return records, diags


def serialize_records(records: list[ExtractionRecord], grammar: RecordGrammar = RecordGrammar()) -> str:
    t = grammar.tuple_delimiter
    lines = []
    for rec in records:
        if isinstance(rec, EntityRecord):
            fields = ['"entity"', f'"{rec.name}"', f'"{rec.entity_type}"', f'"{rec.description}"']
        else:
            fields = [
                '"relationship"',
                f'"{rec.source}"',
                f'"{rec.target}"',
                f'"{rec.description}"',
                _format_strength(rec.strength),
            ]
        lines.append("(" + t.join(fields) + ")")
    return grammar.record_delimiter.join(lines) + (grammar.record_delimiter if lines else "") + grammar.completion_delimiter
