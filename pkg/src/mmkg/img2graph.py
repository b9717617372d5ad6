"""Turn one image (plus optional pre-segmented feature blocks) into an image KG."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import MMKGError, ValidationError
from .gateway import Gateway
from .graph import Entity, GraphKind, KnowledgeGraph, Modality, Relation, canonical_name
from .records import EntityRecord, RecordGrammar, RelationshipRecord, parse_records

log = logging.getLogger(__name__)

BLOCK_CATEGORIES = ("object", "organism", "person")
DEFAULT_ENTITY_TYPES = ("person", "object", "organism", "location", "event", "text", "concept")
GLOBAL_ENTITY_TYPE = "IMAGE"
GLOBAL_RELATION_STRENGTH = 5.0

_CATEGORY = re.compile(
    r"category of this image feature block is\s*[\"'‘“]?\s*(object|organism|person)", re.IGNORECASE
)
_NO_MATCH = re.compile(r"^\W*no\s+match\W*$", re.IGNORECASE)


def note(diag: list[str] | None, message: str) -> None:
    log.info(message)
    if diag is not None:
        diag.append(message)


def is_no_match(reply: str) -> bool:
    return bool(_NO_MATCH.match(reply.strip()))


@dataclass(frozen=True)
class FeatureBlockDescription:
    block_name: str
    category: str
    description: str
    block_path: str = ""

    def __post_init__(self) -> None:
        if self.category not in BLOCK_CATEGORIES:
            raise ValidationError(f"unknown block category {self.category!r}")


def _resolve(path: str, base_dir: str | Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def describe_blocks(
    image,
    gateway: Gateway,
    *,
    base_dir: str | Path | None = None,
    diag: list[str] | None = None,
) -> list[FeatureBlockDescription]:
    if not image.segmentation or not image.feature_blocks:
        raise ValidationError(f"image {image.image_id} has no feature blocks to describe")
    out = []
    for block_name, block_path in image.feature_blocks:
        reply = gateway.vision_chat("block_description", {"block_name": block_name}, [_resolve(block_path, base_dir)])
        m = _CATEGORY.search(reply)
        if m:
            category = m.group(1).lower()
        else:
            category = "object"
            note(diag, f"image {image.image_id} block {block_name}: no category in reply, using 'object'")
        out.append(FeatureBlockDescription(block_name, category, reply.strip(), block_path))
    return out


def extract_scene_graph(
    image,
    gateway: Gateway,
    grammar: RecordGrammar = RecordGrammar(),
    *,
    base_dir: str | Path | None = None,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    diag: list[str] | None = None,
) -> KnowledgeGraph:
    bindings = {**grammar.bindings(), "entity_types": ",".join(entity_types), "context": image.context}
    reply = gateway.vision_chat("image_extraction", bindings, [_resolve(image.image_path, base_dir)])
    records, problems = parse_records(reply, grammar)
    for p in problems:
        note(diag, f"image {image.image_id} extraction: {p}")
    return records_to_graph(
        records,
        GraphKind.IMAGE_KG,
        Modality.IMAGE_LOCAL,
        [image.chunk_id] if image.chunk_id else [],
        diag=diag,
        label=f"image {image.image_id}",
        image_path=image.image_path,
    )


def records_to_graph(
    records,
    kind: GraphKind,
    modality: Modality,
    chunk_ids: list[str],
    *,
    graph: KnowledgeGraph | None = None,
    diag: list[str] | None = None,
    label: str = "",
    image_path: str = "",
) -> KnowledgeGraph:
    """Upsert parsed records into ``graph`` (a fresh one by default)."""
    kg = graph if graph is not None else KnowledgeGraph(kind)
    for rec in records:
        if isinstance(rec, EntityRecord):
            kg.upsert(Entity(rec.name, rec.entity_type.strip().upper(), rec.description.strip(), modality, list(chunk_ids),
                             image_path=image_path))
    for rec in records:
        if not isinstance(rec, RelationshipRecord):
            continue
        src, tgt = canonical_name(rec.source), canonical_name(rec.target)
        if src == tgt:
            note(diag, f"{label}: self relation on {src!r} skipped")
        elif src not in kg.entities or tgt not in kg.entities:
            note(diag, f"{label}: relation {src!r} -> {tgt!r} names an unknown entity")
        else:
            kg.add_relation(Relation(src, tgt, rec.description.strip(), rec.strength))
    if not kg.entities:
        note(diag, f"{label}: no entities extracted")
    return kg


def align_blocks(
    blocks: Sequence[FeatureBlockDescription],
    ikg: KnowledgeGraph,
    image,
    gateway: Gateway,
    grammar: RecordGrammar = RecordGrammar(),
    *,
    base_dir: str | Path | None = None,
    diag: list[str] | None = None,
) -> list[Relation]:
    """Add each block as an ``image_block`` entity and link it to the entity it depicts."""
    local = ikg.by_modality(Modality.IMAGE_LOCAL)
    if not local:
        raise ValidationError(f"image {image.image_id}: no scene entities to align blocks with")
    listing = "\n".join(f'"{e.name}" - "{e.description}"' for e in local)
    chunk_ids = [image.chunk_id] if image.chunk_id else []
    added: list[Relation] = []
    for block in blocks:
        block_key = canonical_name(block.block_name)
        existing = ikg.get(block_key)
        if existing is not None and existing.modality is not Modality.IMAGE_BLOCK:
            note(diag, f"image {image.image_id}: block name {block.block_name!r} collides with a scene entity")
            continue
        ikg.upsert(
            Entity(block.block_name, block.category.upper(), block.description, Modality.IMAGE_BLOCK,
                   list(chunk_ids), image_path=block.block_path)
        )
        bindings = {**grammar.bindings(), "block_name": block.block_name, "entity_descriptions": listing}
        reply = gateway.vision_chat("block_alignment", bindings, [_resolve(block.block_path, base_dir)])
        if is_no_match(reply):
            continue
        records, _ = parse_records(reply, grammar)
        rel = _block_relation(records, block_key, ikg)
        if rel is None:
            note(diag, f"image {image.image_id} block {block.block_name}: reply names no known scene entity")
            continue
        if ikg.add_relation(rel):
            added.append(rel)
    return added


def _block_relation(records, block_key: str, ikg: KnowledgeGraph) -> Relation | None:
    for rec in records:
        if not isinstance(rec, RelationshipRecord):
            continue
        src, tgt = canonical_name(rec.source), canonical_name(rec.target)
        if tgt == block_key:
            other = src
        elif src == block_key:
            other = tgt
        else:
            continue
        ent = ikg.get(other)
        if ent is not None and ent.modality is Modality.IMAGE_LOCAL:
            return Relation(ent.name, block_key, rec.description.strip(), rec.strength)
    return None


def build_global_entity(image, ikg: KnowledgeGraph, strength: float = GLOBAL_RELATION_STRENGTH) -> KnowledgeGraph:
    name = image.global_entity_name
    description = image.description or f"Image {image.image_id} of the document."
    ikg.upsert(
        Entity(name, GLOBAL_ENTITY_TYPE, description, Modality.IMAGE_GLOBAL,
               [image.chunk_id] if image.chunk_id else [], image_path=image.image_path)
    )
    for ent in ikg.by_modality(Modality.IMAGE_LOCAL):
        ikg.add_relation(Relation(name, ent.name, f"{ent.name} appears in image {image.image_id}", strength))
    return ikg


def image_to_graph(
    image,
    gateway: Gateway,
    grammar: RecordGrammar = RecordGrammar(),
    *,
    base_dir: str | Path | None = None,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    diag: list[str] | None = None,
) -> KnowledgeGraph:
    blocks: list[FeatureBlockDescription] = []
    if image.segmentation and image.feature_blocks:
        blocks = describe_blocks(image, gateway, base_dir=base_dir, diag=diag)
    ikg = extract_scene_graph(image, gateway, grammar, base_dir=base_dir, entity_types=entity_types, diag=diag)
    if blocks:
        if ikg.by_modality(Modality.IMAGE_LOCAL):
            align_blocks(blocks, ikg, image, gateway, grammar, base_dir=base_dir, diag=diag)
        else:
            note(diag, f"image {image.image_id}: feature blocks left unaligned (no scene entities)")
    return build_global_entity(image, ikg)


def build_image_kgs(
    images,
    gateway: Gateway,
    grammar: RecordGrammar = RecordGrammar(),
    *,
    base_dir: str | Path | None = None,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    diag: list[str] | None = None,
) -> dict[int, KnowledgeGraph]:
    """Run :func:`image_to_graph` per image; a failing image is reported and skipped."""
    out: dict[int, KnowledgeGraph] = {}
    for image in sorted(images, key=lambda im: im.image_id):
        try:
            out[image.image_id] = image_to_graph(
                image, gateway, grammar, base_dir=base_dir, entity_types=entity_types, diag=diag
            )
        except (MMKGError, OSError) as exc:
            note(diag, f"image {image.image_id} failed: {exc}")
    return out
