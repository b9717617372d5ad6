"""Query-time retrieval of entities, relations, source chunks and images."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

from .errors import ParameterError
from .gateway import Gateway
from .graph import Entity, KnowledgeGraph, Modality, Relation, TextChunk
from .vdb import EntityIndex


@dataclass
class RetrievalConfig:
    top_k_entities: int = 10
    entity_relation_token_budget: int = 4000
    max_chunks: int = 10

    def __post_init__(self) -> None:
        for name in ("top_k_entities", "entity_relation_token_budget", "max_chunks"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")


def count_tokens(text: str) -> int:
    return math.ceil(len(text.split()) * 1.3)


def entity_line(entity: Entity) -> str:
    return f"{entity.name} ({entity.entity_type}): {entity.description}"


def relation_line(rel: Relation) -> str:
    return f"{rel.source} -> {rel.target}: {rel.description} (strength {rel.strength:g})"


@dataclass
class ContextBundle:
    query: str = ""
    entities: list[tuple[Entity, float]] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)
    chunks: list[TextChunk] = field(default_factory=list)
    images: list[str] = field(default_factory=list)

    def graph_tokens(self) -> int:
        return sum(count_tokens(entity_line(e)) for e, _ in self.entities) + sum(
            count_tokens(relation_line(r)) for r in self.relations
        )

    def to_text(self) -> str:
        parts = ["-Entities-"]
        parts += [entity_line(e) for e, _ in self.entities]
        parts.append("-Relations-")
        parts += [relation_line(r) for r in self.relations]
        parts.append("-Sources-")
        parts += [c.content for c in self.chunks]
        return "\n".join(parts)

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "entities": [
                {"name": e.name, "entity_type": e.entity_type, "description": e.description,
                 "modality": e.modality.value, "score": round(s, 12)}
                for e, s in self.entities
            ],
            "relations": [
                {"source": r.source, "target": r.target, "description": r.description, "strength": r.strength}
                for r in self.relations
            ],
            "chunks": [{"chunk_id": c.chunk_id, "chunk_order_index": c.order_index, "content": c.content} for c in self.chunks],
            "images": list(self.images),
        }


def retrieve(
    query: str,
    mmkg: KnowledgeGraph,
    vdb: EntityIndex,
    gateway: Gateway,
    chunks: Mapping[str, TextChunk] | None = None,
    config: RetrievalConfig = RetrievalConfig(),
) -> ContextBundle:
    bundle = ContextBundle(query)
    names = [n for n in vdb.names if n in mmkg.entities]
    if not names or not query.strip():
        return bundle
    qvec = gateway.embed([query])[0]
    all_scores = dict(zip(vdb.names, vdb.scores(qvec)))
    ranked = sorted(names, key=lambda n: (-float(all_scores[n]), n))[: config.top_k_entities]

    budget = config.entity_relation_token_budget
    used = 0
    for name in ranked:
        cost = count_tokens(entity_line(mmkg.entities[name]))
        if used + cost > budget:
            break
        used += cost
        bundle.entities.append((mmkg.entities[name], float(all_scores[name])))

    selected = {e.name for e, _ in bundle.entities}
    touching = [(i, r) for i, r in enumerate(mmkg.relations) if r.source in selected or r.target in selected]
    touching.sort(key=lambda ir: (-ir[1].strength, ir[0]))
    for _, rel in touching:
        cost = count_tokens(relation_line(rel))
        if used + cost > budget:
            break
        used += cost
        bundle.relations.append(rel)

    if chunks:
        cites = Counter(cid for e, _ in bundle.entities for cid in dict.fromkeys(e.source_chunk_ids) if cid in chunks)
        order = sorted(cites, key=lambda cid: (-cites[cid], chunks[cid].order_index, cid))
        bundle.chunks = [chunks[cid] for cid in order[: config.max_chunks]]

    for e, _ in bundle.entities:
        if e.modality in (Modality.IMAGE_GLOBAL, Modality.MERGED) and e.image_path and e.image_path not in bundle.images:
            bundle.images.append(e.image_path)
    return bundle
