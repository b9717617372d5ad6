"""Property-graph data model shared by every stage.

Entities are keyed by an uppercased canonical name. Relations are stored as a
directed list but every structural query (neighbors, affinity, retrieval)
treats them as undirected.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .errors import NotFoundError, ValidationError

DEFAULT_SEPARATOR = "<SEP>"


class Modality(str, Enum):
    TEXT = "text"
    IMAGE_LOCAL = "image_local"
    IMAGE_GLOBAL = "image_global"
    IMAGE_BLOCK = "image_block"
    MERGED = "merged"


class GraphKind(str, Enum):
    TEXT_KG = "text_kg"
    IMAGE_KG = "image_kg"
    MMKG = "mmkg"


IMAGE_MODALITIES = frozenset({Modality.IMAGE_LOCAL, Modality.IMAGE_GLOBAL, Modality.IMAGE_BLOCK})
TEXTUAL_MODALITIES = frozenset({Modality.TEXT, Modality.MERGED})


def canonical_name(name: str) -> str:
    return name.strip().upper()


def _union(first: Iterable[str], second: Iterable[str]) -> list[str]:
    out = list(first)
    seen = set(out)
    for item in second:
        if item not in seen:
            out.append(item)
            seen.add(item)
    return out


def join_descriptions(parts: Iterable[str], sep: str = DEFAULT_SEPARATOR) -> str:
    pieces: list[str] = []
    for part in parts:
        for piece in part.split(sep) if part else []:
            if piece and piece not in pieces:
                pieces.append(piece)
    return sep.join(pieces)


@dataclass(eq=True)
class Entity:
    name: str
    entity_type: str = ""
    description: str = ""
    modality: Modality = Modality.TEXT
    source_chunk_ids: list[str] = field(default_factory=list)
    source_image_entities: list[str] = field(default_factory=list)
    source_text_entities: list[str] = field(default_factory=list)
    image_path: str = ""

    def __post_init__(self) -> None:
        self.name = canonical_name(self.name)
        self.modality = Modality(self.modality)

    def __hash__(self) -> int:
        return hash(self.name)

    def embedding_text(self) -> str:
        return f"{self.name}: {self.description}"


@dataclass(eq=True)
class Relation:
    source: str
    target: str
    description: str = ""
    strength: float = 1.0

    def __post_init__(self) -> None:
        self.source = canonical_name(self.source)
        self.target = canonical_name(self.target)
        self.strength = float(self.strength)
        if not 1.0 <= self.strength <= 10.0:
            raise ValidationError(f"relation strength {self.strength} outside [1, 10]")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.source, self.target, self.description)

    def other(self, name: str) -> str:
        return self.target if self.source == name else self.source


@dataclass
class TextChunk:
    chunk_id: str
    order_index: int
    content: str
    token_count: int = 0


@dataclass
class ImageRecord:
    image_id: int
    image_path: str
    caption: list[str] = field(default_factory=list)
    footnote: list[str] = field(default_factory=list)
    context: str = ""
    chunk_order_index: int = 0
    chunk_id: str = ""
    description: str = ""
    segmentation: bool = False
    feature_blocks: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.image_id < 1:
            raise ValidationError(f"image_id must be >= 1, got {self.image_id}")
        if not self.segmentation and self.feature_blocks:
            raise ValidationError(f"image {self.image_id} has feature blocks but segmentation is false")

    @property
    def key(self) -> str:
        return f"image_{self.image_id}"

    @property
    def global_entity_name(self) -> str:
        return f"IMAGE_{self.image_id}"


@dataclass
class AlignmentRecord:
    image_entity: str
    text_entity: str | None  # None means no match
    candidate_pool: list[str] = field(default_factory=list)
    method: str = ""
    image_id: int | None = None

    def __post_init__(self) -> None:
        if self.text_entity is not None and self.text_entity not in self.candidate_pool:
            raise ValidationError(
                f"aligned text entity {self.text_entity!r} is not in the candidate pool"
            )

    @property
    def matched(self) -> bool:
        return self.text_entity is not None


@dataclass
class MergedEntity:
    merged_entity_name: str
    entity_type: str
    description: str
    source_image_entities: list[str]
    source_text_entities: list[str]

    def __post_init__(self) -> None:
        if not self.merged_entity_name.strip():
            raise ValidationError("merged entity name is empty")
        if not self.source_image_entities or not self.source_text_entities:
            raise ValidationError(
                f"merged entity {self.merged_entity_name!r} needs both image and text sources"
            )


@dataclass
class KnowledgeGraph:
    kind: GraphKind = GraphKind.TEXT_KG
    entities: dict[str, Entity] = field(default_factory=dict)
    relations: list[Relation] = field(default_factory=list)
    # merged-away name -> surviving name
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.kind = GraphKind(self.kind)

    def __len__(self) -> int:
        return len(self.entities)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and canonical_name(name) in self.entities

    def copy(self) -> KnowledgeGraph:
        return copy.deepcopy(self)

    def get(self, name: str) -> Entity | None:
        return self.entities.get(canonical_name(name))

    def require(self, name: str) -> Entity:
        entity = self.get(name)
        if entity is None:
            raise NotFoundError(f"unknown entity {name!r}")
        return entity

    def resolve(self, name: str) -> str:
        """Follow merge aliases to the surviving entity name."""
        key = canonical_name(name)
        seen = set()
        while key not in self.entities and key in self.aliases and key not in seen:
            seen.add(key)
            key = self.aliases[key]
        return key

    def by_modality(self, *modalities: Modality) -> list[Entity]:
        wanted = set(modalities)
        return [e for e in self.entities.values() if e.modality in wanted]

    def relations_of(self, name: str) -> list[Relation]:
        key = canonical_name(name)
        return [r for r in self.relations if key in (r.source, r.target)]

    def upsert(self, entity: Entity, sep: str = DEFAULT_SEPARATOR) -> KnowledgeGraph:
        if not entity.name:
            raise ValidationError("entity name is empty")
        existing = self.entities.get(entity.name)
        if existing is None:
            self.entities[entity.name] = copy.deepcopy(entity)
            return self
        existing.description = join_descriptions([existing.description, entity.description], sep)
        if not existing.entity_type:
            existing.entity_type = entity.entity_type
        if not existing.image_path:
            existing.image_path = entity.image_path
        existing.source_chunk_ids = _union(existing.source_chunk_ids, entity.source_chunk_ids)
        existing.source_image_entities = _union(existing.source_image_entities, entity.source_image_entities)
        existing.source_text_entities = _union(existing.source_text_entities, entity.source_text_entities)
        return self

    def add_relation(self, relation: Relation) -> bool:
        """Append a relation; returns False when it was an exact duplicate."""
        if relation.source == relation.target:
            raise ValidationError(f"self-loop on {relation.source!r}")
        for end in (relation.source, relation.target):
            if end not in self.entities:
                raise NotFoundError(f"relation endpoint {end!r} is not an entity")
        if any(r.key == relation.key for r in self.relations):
            return False
        self.relations.append(copy.copy(relation))
        return True

    def neighbors(self, name: str) -> set[Entity]:
        key = self.require(name).name
        out: set[Entity] = set()
        for r in self.relations:
            if key in (r.source, r.target):
                other = r.other(key)
                if other != key:
                    out.add(self.entities[other])
        return out

    def merge(
        self,
        canonical: str,
        members: list[str],
        merged_description: str | None = None,
        *,
        entity_type: str | None = None,
        modality: Modality | None = None,
        sep: str = DEFAULT_SEPARATOR,
    ) -> KnowledgeGraph:
        """Collapse ``members`` into one entity named ``canonical``.

        Members already merged away are resolved through the alias table, which
        makes repeating a merge a no-op. Relations are rewritten onto the
        survivor; resulting self-loops and exact duplicates are dropped.
        """
        target = canonical_name(canonical)
        if not target:
            raise ValidationError("canonical name is empty")
        resolved: list[str] = []
        for m in members:
            key = self.resolve(m)
            if key not in self.entities:
                raise NotFoundError(f"unknown merge member {m!r}")
            if key not in resolved:
                resolved.append(key)
        if not resolved:
            raise ValidationError("merge needs at least one member")
        if target in self.entities and target not in resolved:
            raise ValidationError(f"canonical name {target!r} belongs to a non-member entity")

        parts = [self.entities[k] for k in resolved]
        base = self.entities[target] if target in resolved else parts[0]
        survivor = copy.deepcopy(base)
        survivor.name = target
        if merged_description is None:
            survivor.description = join_descriptions([p.description for p in parts], sep)
        else:
            survivor.description = merged_description
        if entity_type is not None:
            survivor.entity_type = entity_type
        if modality is not None:
            survivor.modality = Modality(modality)
        for p in parts:
            survivor.source_chunk_ids = _union(survivor.source_chunk_ids, p.source_chunk_ids)
            survivor.source_image_entities = _union(survivor.source_image_entities, p.source_image_entities)
            survivor.source_text_entities = _union(survivor.source_text_entities, p.source_text_entities)
            if not survivor.image_path:
                survivor.image_path = p.image_path

        if resolved == [target] and survivor == self.entities[target]:
            return self

        # rebuild the entity map in place so insertion order stays stable
        rebuilt: dict[str, Entity] = {}
        placed = False
        for key, ent in self.entities.items():
            if key in resolved:
                if not placed:
                    rebuilt[target] = survivor
                    placed = True
            else:
                rebuilt[key] = ent
        self.entities = rebuilt
        for k in resolved:
            if k != target:
                self.aliases[k] = target
        self.aliases.pop(target, None)

        member_set = set(resolved)
        rewritten: list[Relation] = []
        seen: set[tuple[str, str, str]] = set()
        for r in self.relations:
            src = target if r.source in member_set else r.source
            tgt = target if r.target in member_set else r.target
            if src == tgt:
                continue
            rel = Relation(src, tgt, r.description, r.strength)
            if rel.key in seen:
                continue
            seen.add(rel.key)
            rewritten.append(rel)
        self.relations = rewritten
        return self

    def check_integrity(self) -> None:
        for r in self.relations:
            for end in (r.source, r.target):
                if end not in self.entities:
                    raise ValidationError(f"dangling relation endpoint {end!r}")
        for e in self.entities.values():
            if e.modality is Modality.MERGED and not (e.source_image_entities and e.source_text_entities):
                raise ValidationError(f"merged entity {e.name!r} lacks image or text sources")


def upsert_entity(graph: KnowledgeGraph, entity: Entity, sep: str = DEFAULT_SEPARATOR) -> KnowledgeGraph:
    return graph.upsert(entity, sep)


def neighbors(graph: KnowledgeGraph, name: str) -> set[Entity]:
    return graph.neighbors(name)


def merge_entities(
    graph: KnowledgeGraph,
    canonical: str,
    members: list[str],
    merged_description: str | None = None,
    **kwargs,
) -> KnowledgeGraph:
    return graph.merge(canonical, members, merged_description, **kwargs)
