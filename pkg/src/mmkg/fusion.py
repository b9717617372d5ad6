"""Cross-modal entity linking and graph fusion.

For each image, in id order: link its scene entities to textual entities near
the image, enrich the ones left unlinked, anchor the global image node to a
textual entity (creating one when nothing fits), then fold the image graph
into the growing multimodal graph, merging every linked pair.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .candidates import CandidateConfig, CandidateGenerator, ContextPool, context_entity_pool, visual_entities
from .errors import GatewayError, MMKGError, ValidationError
from .gateway import Gateway
from .graph import (
    AlignmentRecord,
    Entity,
    GraphKind,
    KnowledgeGraph,
    MergedEntity,
    Modality,
    Relation,
    TextChunk,
    canonical_name,
    join_descriptions,
)
from .img2graph import GLOBAL_RELATION_STRENGTH, is_no_match, note
from .stores import alignment_to_dict, merged_to_dict
from .vdb import EntityIndex

log = logging.getLogger(__name__)

CREATED_ENTITY_TYPE = "CONCEPT"


@dataclass
class FusionReport:
    image_id: int
    alignments: list[AlignmentRecord] = field(default_factory=list)
    enhanced: list[str] = field(default_factory=list)
    global_alignment: str = ""
    global_created: bool = False
    merged: list[MergedEntity] = field(default_factory=list)
    renamed: dict[str, str] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)
    skipped: bool = False

    @property
    def merges(self) -> int:
        return len(self.merged)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "skipped": self.skipped,
            "alignments": [alignment_to_dict(a) for a in self.alignments],
            "enhanced": list(self.enhanced),
            "global_alignment": self.global_alignment,
            "global_created": self.global_created,
            "merged": [merged_to_dict(m) for m in self.merged],
            "renamed": dict(self.renamed),
            "diagnostics": list(self.diagnostics),
        }


def _entity_json(entities: Sequence[Entity], extra: Mapping[str, str] | None = None) -> str:
    rows = []
    for e in entities:
        row = {"entity_name": e.name, "entity_type": e.entity_type, "description": e.description}
        if extra is not None:
            row["additional_info"] = extra.get(e.name, "")
        rows.append(row)
    return json.dumps(rows, ensure_ascii=False)


def _json_payload(reply: str):
    """First JSON list or object embedded in ``reply``, or None."""
    text = reply.strip()
    for open_, close in (("[", "]"), ("{", "}")):
        start, end = text.find(open_), text.rfind(close)
        if 0 <= start < end:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                continue
    return None


# -- linking -------------------------------------------------------------------


def align_entity(
    visual: Entity,
    candidates: Sequence[Entity],
    context_text: str,
    gateway: Gateway,
    *,
    method: str = "",
    image_id: int | None = None,
    additional_info: Mapping[str, str] | None = None,
    diag: list[str] | None = None,
) -> AlignmentRecord:
    pool = [c.name for c in candidates]
    record = AlignmentRecord(visual.name, None, pool, method, image_id)
    if not candidates:
        return record
    bindings = {
        "img_entity": visual.name,
        "img_entity_description": visual.description,
        "chunk_text": context_text,
        "possible_image_matched_entities": _entity_json(candidates, additional_info or {}),
    }
    try:
        reply = gateway.chat("cmel_alignment", bindings)
    except GatewayError as exc:
        note(diag, f"alignment of {visual.name!r} failed: {exc}")
        return record
    if is_no_match(reply):
        return record
    answer = canonical_name(reply.strip().strip("\"'`.").strip())
    if answer in pool:
        record.text_entity = answer
        return record
    note(diag, f"alignment of {visual.name!r}: reply {reply.strip()[:60]!r} is not a candidate")
    return record


def enhance_entities(
    unaligned: Sequence[Entity],
    pool: ContextPool | None,
    chunk_text: str,
    gateway: Gateway,
    *,
    diag: list[str] | None = None,
) -> list[Entity]:
    """Enriched copies of ``unaligned`` (same order); inputs are never mutated."""
    originals = [copy.deepcopy(e) for e in unaligned]
    if not originals:
        return []
    context = chunk_text
    if pool is not None and len(pool):
        context += "\n\nRelated entities:\n" + "\n".join(f"- {e.name}: {e.description}" for e in pool.entities)
    bindings = {"img_entity_list": _entity_json(originals), "chunk_text": context}
    try:
        reply = gateway.chat("enhancement", bindings)
    except GatewayError as exc:
        note(diag, f"enhancement failed: {exc}")
        return originals
    payload = _json_payload(reply)
    if isinstance(payload, dict):
        payload = [payload]
    if not isinstance(payload, list):
        note(diag, "enhancement reply is not a JSON list; entities left unchanged")
        return originals
    by_name = {e.name: e for e in originals}
    for item in payload:
        if not isinstance(item, dict):
            continue
        original = canonical_name(str(item.get("original_name", "")))
        target = by_name.get(original)
        if target is None:
            note(diag, f"enhancement names unknown original entity {original!r}")
            continue
        desc = item.get("description")
        if isinstance(desc, str) and desc.strip():
            target.description = desc.strip()
        new_name = item.get("entity_name")
        if isinstance(new_name, str) and canonical_name(new_name):
            target.name = canonical_name(new_name)
        # entity_type is kept from the original regardless of the reply
    return originals


def fuse_pair(
    image_entity: Entity,
    text_entity: Entity,
    gateway: Gateway | None,
    context_text: str = "",
    *,
    diag: list[str] | None = None,
) -> MergedEntity:
    if text_entity.modality is Modality.MERGED and text_entity.source_text_entities:
        text_sources = list(text_entity.source_text_entities)
    else:
        text_sources = [text_entity.name]
    image_sources = [image_entity.name]

    def fallback() -> MergedEntity:
        return MergedEntity(
            text_entity.name,
            text_entity.entity_type or image_entity.entity_type,
            join_descriptions([text_entity.description, image_entity.description]),
            image_sources,
            text_sources,
        )

    if gateway is None:
        return fallback()
    bindings = {
        "image_entities": _entity_json([image_entity]),
        "original_text": context_text,
        "nearby_text_entities": _entity_json([text_entity]),
    }
    try:
        reply = gateway.chat("fusion", bindings)
    except GatewayError as exc:
        note(diag, f"fusion of {image_entity.name!r} with {text_entity.name!r} failed: {exc}")
        return fallback()
    payload = _json_payload(reply)
    if isinstance(payload, list):
        payload = next((p for p in payload if isinstance(p, dict)), None)
    if not isinstance(payload, dict):
        note(diag, f"fusion of {image_entity.name!r}: unparseable reply; using fallback")
        return fallback()
    name = payload.get("merged_entity_name") or payload.get("entity_name")
    if not isinstance(name, str) or not canonical_name(name):
        note(diag, f"fusion of {image_entity.name!r}: reply has no merged name; using fallback")
        return fallback()
    etype = payload.get("entity_type")
    desc = payload.get("description")
    return MergedEntity(
        canonical_name(name),
        etype.strip().upper() if isinstance(etype, str) and etype.strip() else (text_entity.entity_type or image_entity.entity_type),
        desc.strip() if isinstance(desc, str) and desc.strip() else join_descriptions([text_entity.description, image_entity.description]),
        image_sources,
        text_sources,
    )


def align_global_entity(
    global_entity: Entity,
    image,
    generator: CandidateGenerator,
    gateway: Gateway,
    graph: KnowledgeGraph,
    *,
    diag: list[str] | None = None,
) -> tuple[str, Entity | None, AlignmentRecord]:
    """Link the global image node to a textual entity.

    Returns ``(name, created, record)``; ``created`` is the new textual entity
    when nothing matched (it is not yet inserted into ``graph``).
    """
    if global_entity.modality is not Modality.IMAGE_GLOBAL:
        raise ValidationError(f"{global_entity.name!r} is not a global image entity")
    vec = gateway.embed([global_entity.embedding_text()])[0]
    cands = generator.generate(global_entity, vec)
    record = align_entity(
        global_entity, cands.entities, generator.pool.chunk_text, gateway,
        method=generator.config.strategy, image_id=image.image_id, diag=diag,
    )
    if record.text_entity is not None:
        return record.text_entity, None, record
    base = canonical_name(image.caption[0]) if image.caption and image.caption[0].strip() else f"CONTENT OF IMAGE {image.image_id}"
    name = base
    if name in graph:
        name = f"{base} (IMAGE {image.image_id})"
    created = Entity(
        name,
        CREATED_ENTITY_TYPE,
        image.description or image.context or base,
        Modality.TEXT,
        [image.chunk_id] if image.chunk_id else [],
    )
    return created.name, created, record


# -- fusion ----------------------------------------------------------------------


def _rename(graph: KnowledgeGraph, old: str, new: str) -> None:
    ent = graph.require(old)
    graph.merge(new, [old], ent.description)


def fuse_image(
    mmkg: KnowledgeGraph,
    image_kg: KnowledgeGraph,
    image,
    chunks: Mapping[str, TextChunk],
    gateway: Gateway,
    config: CandidateConfig = CandidateConfig(),
) -> tuple[KnowledgeGraph, FusionReport]:
    """Fold one image graph into ``mmkg``. Inputs are left untouched."""
    report = FusionReport(image.image_id)
    diag = report.diagnostics
    gname = image.global_entity_name
    if gname in mmkg:
        report.skipped = True
        return mmkg, report

    work = mmkg.copy()
    work.kind = GraphKind.MMKG
    ikg = image_kg.copy()
    if gname not in ikg:
        raise ValidationError(f"image graph for image {image.image_id} has no global entity {gname}")

    pool = context_entity_pool(work, chunks, image, gateway, config.window_radius)
    generator = CandidateGenerator(pool, config, gateway, diag)
    visuals = visual_entities(ikg)

    # 1. link scene entities
    if visuals:
        vecs = gateway.embed([v.embedding_text() for v in visuals])
        for v, vec in zip(visuals, vecs):
            cands = generator.generate(v, vec)
            sims = {c.name: f"candidate generated by {config.strategy}" for c in cands.entities}
            report.alignments.append(
                align_entity(v, cands.entities, pool.chunk_text, gateway,
                             method=config.strategy, image_id=image.image_id, additional_info=sims, diag=diag)
            )
    aligned = {a.image_entity: a.text_entity for a in report.alignments if a.matched}

    # 2. enrich the rest
    unaligned = [v for v in visuals if v.name not in aligned]
    enhanced = enhance_entities(unaligned, pool, pool.chunk_text, gateway, diag=diag)
    for before, after in zip(unaligned, enhanced):
        if after.name != before.name and (after.name in ikg or after.name in work):
            note(diag, f"enhanced name {after.name!r} for {before.name!r} is taken; keeping original name")
            after.name = before.name
        if after.name != before.name:
            _rename(ikg, before.name, after.name)
        ikg.require(after.name).description = after.description
        report.enhanced.append(after.name)

    # 3. anchor the global node
    global_entity = ikg.require(gname)
    target, created, _ = align_global_entity(global_entity, image, generator, gateway, work, diag=diag)
    report.global_alignment = target
    report.global_created = created is not None
    if created is not None:
        work.upsert(created)

    # 4. merge graphs; image entity names that clash with the text side get a suffix
    for name in list(ikg.entities):
        if name in work:
            new = f"{name} [{gname}]"
            _rename(ikg, name, new)
            report.renamed[name] = new
    for ent in ikg.entities.values():
        work.upsert(ent)
    for rel in ikg.relations:
        work.add_relation(rel)
    work.add_relation(Relation(gname, work.resolve(target), f"{gname} depicts {target}", GLOBAL_RELATION_STRENGTH))

    for image_name, text_name in aligned.items():
        image_key = report.renamed.get(image_name, image_name)
        text_key = work.resolve(text_name)
        image_ent, text_ent = work.require(image_key), work.require(text_key)
        merged = fuse_pair(image_ent, text_ent, gateway, pool.chunk_text, diag=diag)
        merged.source_image_entities = [image_name]
        name = canonical_name(merged.merged_entity_name)
        if name in work and name not in (image_key, text_key):
            note(diag, f"merged name {name!r} is taken; using {text_key!r}")
            name = text_key
        merged.merged_entity_name = name
        prior_images = list(text_ent.source_image_entities)
        prior_texts = list(text_ent.source_text_entities) if text_ent.modality is Modality.MERGED else []
        work.merge(name, [text_key, image_key], merged.description,
                   entity_type=merged.entity_type, modality=Modality.MERGED)
        survivor = work.require(name)
        survivor.source_image_entities = _dedupe(prior_images + [image_name])
        survivor.source_text_entities = _dedupe(prior_texts + list(merged.source_text_entities))
        report.merged.append(merged)

    work.check_integrity()
    return work, report


def _dedupe(items: list[str]) -> list[str]:
    return list(dict.fromkeys(items))


@dataclass
class BuildResult:
    mmkg: KnowledgeGraph
    vdb: EntityIndex
    reports: list[FusionReport]

    @property
    def diagnostics(self) -> list[str]:
        return [d for r in self.reports for d in r.diagnostics]


def build_mmkg(
    text_kg: KnowledgeGraph,
    image_kgs: Mapping[int, KnowledgeGraph],
    images,
    chunks: Mapping[str, TextChunk],
    gateway: Gateway,
    config: CandidateConfig = CandidateConfig(),
    *,
    start: KnowledgeGraph | None = None,
    on_image_done: Callable[[int, KnowledgeGraph, FusionReport], None] | None = None,
) -> BuildResult:
    """Fuse every image in id order, then index all entities for retrieval.

    ``start`` resumes from a partially fused graph; images whose global node
    is already present are skipped.
    """
    records = images.values() if isinstance(images, Mapping) else images
    mmkg = (start or text_kg).copy()
    mmkg.kind = GraphKind.MMKG
    reports: list[FusionReport] = []
    for image in sorted(records, key=lambda im: im.image_id):
        ikg = image_kgs.get(image.image_id)
        if ikg is None:
            rep = FusionReport(image.image_id, skipped=True)
            rep.diagnostics.append(f"image {image.image_id}: no image graph available")
            reports.append(rep)
            continue
        try:
            mmkg, rep = fuse_image(mmkg, ikg, image, chunks, gateway, config)
        except (MMKGError, OSError) as exc:
            rep = FusionReport(image.image_id, skipped=True)
            rep.diagnostics.append(f"image {image.image_id} failed: {exc}")
            reports.append(rep)
            continue
        reports.append(rep)
        if on_image_done is not None:
            on_image_done(image.image_id, mmkg, rep)
    vdb = EntityIndex.build(mmkg, gateway)
    return BuildResult(mmkg, vdb, reports)


def bookkeeping_expected(text_kg: KnowledgeGraph, image_kgs: Mapping[int, KnowledgeGraph], reports: Sequence[FusionReport]) -> int:
    """Entity count the fused graph must have given the per-image reports."""
    fused = [r for r in reports if not r.skipped]
    return (
        len(text_kg)
        + sum(len(image_kgs[r.image_id]) for r in fused)
        + sum(1 for r in fused if r.global_created)
        - sum(r.merges for r in fused)
    )
