"""Text-side indexing: chunking, per-chunk entity extraction, duplicate suggestions."""

from __future__ import annotations

import hashlib
import json
import re
from typing import Mapping, Sequence

from .errors import GatewayError, ParameterError
from .gateway import Gateway
from .graph import GraphKind, KnowledgeGraph, Modality, TextChunk, canonical_name
from .img2graph import note, records_to_graph
from .records import RecordGrammar, parse_records
from .stores import DuplicateGroup

DEFAULT_TEXT_ENTITY_TYPES = ("person", "organization", "location", "event", "object", "concept")


def chunk_id_for(content: str) -> str:
    return "chunk-" + hashlib.md5(content.encode("utf-8")).hexdigest()


def chunk_text(text: str, max_tokens: int = 500) -> list[TextChunk]:
    """Pack paragraphs into chunks of at most ``max_tokens`` whitespace tokens.

    A paragraph longer than the limit is split on token boundaries.
    """
    if max_tokens < 1:
        raise ParameterError("max_tokens must be >= 1")
    pieces: list[list[str]] = []
    for para in re.split(r"\n\s*\n", text):
        words = para.split()
        for start in range(0, len(words), max_tokens):
            pieces.append(words[start : start + max_tokens])
    chunks: list[list[str]] = []
    paras: list[list[list[str]]] = []
    for words in pieces:
        if chunks and len(chunks[-1]) + len(words) <= max_tokens:
            chunks[-1].extend(words)
            paras[-1].append(words)
        else:
            chunks.append(list(words))
            paras.append([words])
    out = []
    for i, group in enumerate(paras):
        content = "\n\n".join(" ".join(w) for w in group)
        out.append(TextChunk(chunk_id_for(content), i, content, sum(len(w) for w in group)))
    return out


def extract_text_kg(
    chunks: Sequence[TextChunk],
    gateway: Gateway,
    grammar: RecordGrammar = RecordGrammar(),
    *,
    entity_types: Sequence[str] = DEFAULT_TEXT_ENTITY_TYPES,
    diag: list[str] | None = None,
) -> KnowledgeGraph:
    kg = KnowledgeGraph(GraphKind.TEXT_KG)
    for chunk in sorted(chunks, key=lambda c: c.order_index):
        bindings = {**grammar.bindings(), "entity_types": ",".join(entity_types), "input_text": chunk.content}
        try:
            reply = gateway.chat("text_extraction", bindings)
        except GatewayError as exc:
            note(diag, f"chunk {chunk.order_index}: extraction failed: {exc}")
            continue
        records, problems = parse_records(reply, grammar)
        for p in problems:
            note(diag, f"chunk {chunk.order_index}: {p}")
        records_to_graph(records, GraphKind.TEXT_KG, Modality.TEXT, [chunk.chunk_id],
                         graph=kg, diag=diag, label=f"chunk {chunk.order_index}")
    return kg


def suggest_duplicates(
    kg: KnowledgeGraph,
    chunks: Mapping[str, TextChunk],
    gateway: Gateway,
    *,
    diag: list[str] | None = None,
) -> list[DuplicateGroup]:
    """Ask the model, chunk by chunk, which entities (and their neighbours) are the same thing."""
    groups: list[DuplicateGroup] = []
    seen: set[tuple[str, ...]] = set()
    for chunk in sorted(chunks.values(), key=lambda c: c.order_index):
        names = [e.name for e in kg.entities.values() if chunk.chunk_id in e.source_chunk_ids]
        related = list(names)
        for n in names:
            related += sorted(nb.name for nb in kg.neighbors(n))
        related = list(dict.fromkeys(related))
        if len(related) < 2:
            continue
        listing = [
            {"entity_name": n, "entity_type": kg.entities[n].entity_type, "description": kg.entities[n].description}
            for n in related
        ]
        try:
            reply = gateway.chat("find_duplicates", {"passage": chunk.content, "entity_list": json.dumps(listing, ensure_ascii=False)})
        except GatewayError as exc:
            note(diag, f"chunk {chunk.order_index}: duplicate check failed: {exc}")
            continue
        start, end = reply.find("["), reply.rfind("]")
        try:
            items = json.loads(reply[start : end + 1]) if 0 <= start < end else []
        except json.JSONDecodeError:
            note(diag, f"chunk {chunk.order_index}: duplicate reply is not JSON")
            continue
        for item in items if isinstance(items, list) else []:
            if not isinstance(item, dict):
                continue
            sources = [canonical_name(str(s)) for s in item.get("source_entities", []) if canonical_name(str(s)) in kg]
            name = canonical_name(str(item.get("entity_name", "")))
            key = tuple(sorted(set(sources)))
            if len(key) < 2 or not name or key in seen:
                continue
            seen.add(key)
            groups.append(DuplicateGroup(name, str(item.get("entity_type", "")), str(item.get("description", "")), list(key)))
    return groups


def apply_duplicate_groups(
    kg: KnowledgeGraph, groups: Sequence[DuplicateGroup], diag: list[str] | None = None
) -> KnowledgeGraph:
    """Merge reviewed duplicate groups; groups naming unknown entities are skipped."""
    for g in groups:
        members = [m for m in g.source_entities if m in kg or canonical_name(m) in kg.aliases]
        if len(members) != len(g.source_entities):
            note(diag, f"duplicate group {g.entity_name!r} names unknown entities; skipped")
            continue
        target = canonical_name(g.entity_name)
        if target in kg and kg.resolve(target) not in {kg.resolve(m) for m in members}:
            note(diag, f"duplicate group {g.entity_name!r} would overwrite another entity; skipped")
            continue
        kg.merge(target, members, g.description or None, entity_type=g.entity_type or None)
    return kg
