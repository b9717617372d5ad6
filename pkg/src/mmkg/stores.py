"""JSON key-value stores and GraphML export.

Store documents use the key names of the published CMEL dataset files
(``kv_store_image_data.json`` and friends) so real dataset directories load
without conversion.
"""

from __future__ import annotations

import json
import os
import tempfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import StoreParseError, ValidationError
from .graph import (
    AlignmentRecord,
    Entity,
    GraphKind,
    ImageRecord,
    KnowledgeGraph,
    MergedEntity,
    Modality,
    Relation,
    TextChunk,
)

FORMAT_VERSION = 1

STORE_FILES = {
    "chunk_kg": "kv_store_chunk_knowledge_graph.json",
    "image_kg": "kv_store_image_knowledge_graph.json",
    "image_data": "kv_store_image_data.json",
    "text_chunks": "kv_store_text_chunks.json",
    "aligned_text_entity": "aligned_text_entity.json",
    "merged_entities": "merged_entities.json",
    "ground_truth": "ground_truth.json",
    "mmkg": "kv_store_mmkg.json",
}


@dataclass
class DuplicateGroup:
    """One suggested merge of duplicate text entities (dataset curation aid)."""

    entity_name: str
    entity_type: str
    description: str
    source_entities: list[str]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=4) + "\n"


# -- field helpers -----------------------------------------------------------


class _Reader:
    """Typed field access that reports the offending key path on failure."""

    def __init__(self, path):
        self.path = path

    def fail(self, key: str, reason: str):
        raise StoreParseError(self.path, key, reason)

    def obj(self, value, key: str) -> dict:
        if not isinstance(value, dict):
            self.fail(key, f"expected an object, got {type(value).__name__}")
        return value

    def field(self, doc: dict, name: str, kind, prefix: str, default=...):
        key = f"{prefix}.{name}" if prefix else name
        if name not in doc:
            if default is ...:
                self.fail(key, "missing")
            return default
        value = doc[name]
        if kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif kind is list:
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, kind)
        if not ok:
            self.fail(key, f"expected {kind.__name__}, got {type(value).__name__}")
        return value

    def strings(self, doc: dict, name: str, prefix: str, default=...):
        value = self.field(doc, name, list, prefix, default)
        key = f"{prefix}.{name}"
        for i, item in enumerate(value):
            if not isinstance(item, str):
                self.fail(f"{key}[{i}]", "expected a string")
        return list(value)


# -- graphs ------------------------------------------------------------------


def entity_to_dict(e: Entity) -> dict:
    return {
        "entity_name": e.name,
        "entity_type": e.entity_type,
        "description": e.description,
        "modality": e.modality.value,
        "source_chunk_ids": list(e.source_chunk_ids),
        "source_image_entities": list(e.source_image_entities),
        "source_text_entities": list(e.source_text_entities),
        "image_path": e.image_path,
    }


def graph_to_dict(graph: KnowledgeGraph) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": graph.kind.value,
        "entities": [entity_to_dict(e) for e in graph.entities.values()],
        "relationships": [
            {"source": r.source, "target": r.target, "description": r.description, "strength": r.strength}
            for r in graph.relations
        ],
    }
    if graph.aliases:
        doc["aliases"] = dict(graph.aliases)
    return doc


def graph_from_dict(doc: Any, path="<memory>", prefix: str = "") -> KnowledgeGraph:
    rd = _Reader(path)
    doc = rd.obj(doc, prefix or "<root>")
    p = (prefix + ".") if prefix else ""
    version = rd.field(doc, "format_version", int, prefix, FORMAT_VERSION)
    if version != FORMAT_VERSION:
        rd.fail(f"{p}format_version", f"unsupported version {version}")
    try:
        kind = GraphKind(rd.field(doc, "kind", str, prefix, GraphKind.TEXT_KG.value))
    except ValueError:
        rd.fail(f"{p}kind", "unknown graph kind")
    graph = KnowledgeGraph(kind=kind)
    for i, raw in enumerate(rd.field(doc, "entities", list, prefix)):
        key = f"{p}entities[{i}]"
        raw = rd.obj(raw, key)
        try:
            modality = Modality(rd.field(raw, "modality", str, key, Modality.TEXT.value))
        except ValueError:
            rd.fail(f"{key}.modality", "unknown modality")
        name = rd.field(raw, "entity_name", str, key)
        if not name.strip():
            rd.fail(f"{key}.entity_name", "empty name")
        ent = Entity(
            name=name,
            entity_type=rd.field(raw, "entity_type", str, key, ""),
            description=rd.field(raw, "description", str, key, ""),
            modality=modality,
            source_chunk_ids=rd.strings(raw, "source_chunk_ids", key, []),
            source_image_entities=rd.strings(raw, "source_image_entities", key, []),
            source_text_entities=rd.strings(raw, "source_text_entities", key, []),
            image_path=rd.field(raw, "image_path", str, key, ""),
        )
        if ent.name in graph.entities:
            rd.fail(f"{key}.entity_name", f"duplicate entity {ent.name!r}")
        graph.entities[ent.name] = ent
    for i, raw in enumerate(rd.field(doc, "relationships", list, prefix)):
        key = f"{p}relationships[{i}]"
        raw = rd.obj(raw, key)
        try:
            rel = Relation(
                rd.field(raw, "source", str, key),
                rd.field(raw, "target", str, key),
                rd.field(raw, "description", str, key, ""),
                rd.field(raw, "strength", float, key, 1.0),
            )
        except ValidationError as exc:
            rd.fail(f"{key}.strength", str(exc))
        for end in (rel.source, rel.target):
            if end not in graph.entities:
                rd.fail(key, f"endpoint {end!r} is not an entity")
        if rel.source == rel.target:
            rd.fail(key, "self-loop")
        graph.relations.append(rel)
    aliases = rd.field(doc, "aliases", dict, prefix, {})
    for k, v in aliases.items():
        if not isinstance(v, str):
            rd.fail(f"{p}aliases.{k}", "expected a string")
    graph.aliases = dict(aliases)
    return graph


# -- records -----------------------------------------------------------------


def image_record_to_dict(rec: ImageRecord) -> dict:
    doc = {
        "image_id": rec.image_id,
        "image_path": rec.image_path,
        "caption": list(rec.caption),
        "footnote": list(rec.footnote),
        "context": rec.context,
        "chunk_order_index": rec.chunk_order_index,
        "chunk_id": rec.chunk_id,
        "description": rec.description,
        "segmentation": rec.segmentation,
    }
    if rec.feature_blocks:
        doc["feature_blocks"] = [{"block_name": n, "block_path": p} for n, p in rec.feature_blocks]
    return doc


def image_record_from_dict(raw: Any, path, key: str) -> ImageRecord:
    rd = _Reader(path)
    raw = rd.obj(raw, key)
    blocks = []
    for i, b in enumerate(rd.field(raw, "feature_blocks", list, key, [])):
        bkey = f"{key}.feature_blocks[{i}]"
        b = rd.obj(b, bkey)
        blocks.append((rd.field(b, "block_name", str, bkey), rd.field(b, "block_path", str, bkey)))
    try:
        return ImageRecord(
            image_id=rd.field(raw, "image_id", int, key),
            image_path=rd.field(raw, "image_path", str, key),
            caption=rd.strings(raw, "caption", key, []),
            footnote=rd.strings(raw, "footnote", key, []),
            context=rd.field(raw, "context", str, key, ""),
            chunk_order_index=rd.field(raw, "chunk_order_index", int, key, 0),
            chunk_id=rd.field(raw, "chunk_id", str, key, ""),
            description=rd.field(raw, "description", str, key, ""),
            segmentation=rd.field(raw, "segmentation", bool, key, False),
            feature_blocks=blocks,
        )
    except ValidationError as exc:
        rd.fail(key, str(exc))


def merged_to_dict(m: MergedEntity) -> dict:
    return {
        "merged_entity_name": m.merged_entity_name,
        "entity_type": m.entity_type,
        "description": m.description,
        "source_image_entities": list(m.source_image_entities),
        "source_text_entities": list(m.source_text_entities),
    }


def merged_from_dict(raw: Any, path, key: str) -> MergedEntity:
    rd = _Reader(path)
    raw = rd.obj(raw, key)
    try:
        return MergedEntity(
            merged_entity_name=rd.field(raw, "merged_entity_name", str, key),
            entity_type=rd.field(raw, "entity_type", str, key, ""),
            description=rd.field(raw, "description", str, key, ""),
            source_image_entities=rd.strings(raw, "source_image_entities", key),
            source_text_entities=rd.strings(raw, "source_text_entities", key),
        )
    except ValidationError as exc:
        rd.fail(key, str(exc))


def alignment_to_dict(a: AlignmentRecord) -> dict:
    return {
        "image_id": a.image_id,
        "image_entity": a.image_entity,
        "text_entity": a.text_entity,
        "candidate_pool": list(a.candidate_pool),
        "method": a.method,
    }


def alignment_from_dict(raw: Any, path="<memory>", key: str = "") -> AlignmentRecord:
    rd = _Reader(path)
    raw = rd.obj(raw, key)
    text_entity = raw.get("text_entity")
    if text_entity is not None and not isinstance(text_entity, str):
        rd.fail(f"{key}.text_entity", "expected a string or null")
    image_id = raw.get("image_id")
    if image_id is not None and not isinstance(image_id, int):
        rd.fail(f"{key}.image_id", "expected an integer or null")
    try:
        return AlignmentRecord(
            image_entity=rd.field(raw, "image_entity", str, key),
            text_entity=text_entity,
            candidate_pool=rd.strings(raw, "candidate_pool", key, []),
            method=rd.field(raw, "method", str, key, ""),
            image_id=image_id,
        )
    except ValidationError as exc:
        rd.fail(f"{key}.text_entity", str(exc))


def _image_id_from_key(rd: _Reader, key: str) -> int:
    if not key.startswith("image_") or not key[6:].isdigit():
        rd.fail(key, "expected a key of the form image_<id>")
    return int(key[6:])


# -- top-level encode / decode -------------------------------------------------


def encode_store(obj: Any, store_kind: str) -> Any:
    if store_kind in ("chunk_kg", "mmkg"):
        return graph_to_dict(obj)
    if store_kind == "image_kg":
        return {f"image_{i}": graph_to_dict(g) for i, g in obj.items()}
    if store_kind == "image_data":
        return {rec.key: image_record_to_dict(rec) for rec in obj.values()}
    if store_kind == "text_chunks":
        return {
            c.chunk_id: {"tokens": c.token_count, "content": c.content, "chunk_order_index": c.order_index}
            for c in obj.values()
        }
    if store_kind in ("aligned_text_entity", "ground_truth"):
        return {f"image_{i}": [merged_to_dict(m) for m in items] for i, items in obj.items()}
    if store_kind == "merged_entities":
        return [
            {
                "entity_name": g.entity_name,
                "entity_type": g.entity_type,
                "description": g.description,
                "source_entities": list(g.source_entities),
            }
            for g in obj
        ]
    raise ValueError(f"unknown store kind {store_kind!r}")


def decode_store(doc: Any, store_kind: str, path="<memory>") -> Any:
    rd = _Reader(path)
    if store_kind in ("chunk_kg", "mmkg"):
        return graph_from_dict(doc, path)
    if store_kind == "image_kg":
        doc = rd.obj(doc, "<root>")
        return {_image_id_from_key(rd, k): graph_from_dict(v, path, k) for k, v in doc.items()}
    if store_kind == "image_data":
        doc = rd.obj(doc, "<root>")
        out: dict[int, ImageRecord] = {}
        for k, v in doc.items():
            rec = image_record_from_dict(v, path, k)
            if _image_id_from_key(rd, k) != rec.image_id:
                rd.fail(f"{k}.image_id", f"does not match key {k!r}")
            out[rec.image_id] = rec
        return out
    if store_kind == "text_chunks":
        doc = rd.obj(doc, "<root>")
        chunks: dict[str, TextChunk] = {}
        for k, v in doc.items():
            v = rd.obj(v, k)
            chunks[k] = TextChunk(
                chunk_id=k,
                order_index=rd.field(v, "chunk_order_index", int, k),
                content=rd.field(v, "content", str, k),
                token_count=rd.field(v, "tokens", int, k, 0),
            )
        return chunks
    if store_kind in ("aligned_text_entity", "ground_truth"):
        doc = rd.obj(doc, "<root>")
        result: dict[int, list[MergedEntity]] = {}
        for k, items in doc.items():
            image_id = _image_id_from_key(rd, k)
            if not isinstance(items, list):
                rd.fail(k, "expected a list")
            result[image_id] = [merged_from_dict(m, path, f"{k}[{i}]") for i, m in enumerate(items)]
        return result
    if store_kind == "merged_entities":
        if not isinstance(doc, list):
            rd.fail("<root>", "expected a list")
        groups = []
        for i, raw in enumerate(doc):
            key = f"[{i}]"
            raw = rd.obj(raw, key)
            groups.append(
                DuplicateGroup(
                    entity_name=rd.field(raw, "entity_name", str, key),
                    entity_type=rd.field(raw, "entity_type", str, key, ""),
                    description=rd.field(raw, "description", str, key, ""),
                    source_entities=rd.strings(raw, "source_entities", key),
                )
            )
        return groups
    raise ValueError(f"unknown store kind {store_kind!r}")


def save_store(obj: Any, path: str | os.PathLike, store_kind: str) -> Path:
    path = Path(path)
    atomic_write_text(path, dump_json(encode_store(obj, store_kind)))
    return path


def load_store(path: str | os.PathLike, store_kind: str) -> Any:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StoreParseError(path, "<root>", f"invalid JSON: {exc}") from exc
    return decode_store(doc, store_kind, path)


# -- GraphML -------------------------------------------------------------------

_GRAPHML_NS = "http://graphml.graphdrawing.org/xmlns"
_NODE_KEYS = [
    ("d0", "entity_type", "string"),
    ("d1", "description", "string"),
    ("d2", "modality", "string"),
    ("d3", "source_chunk_ids", "string"),
    ("d4", "image_path", "string"),
]
_EDGE_KEYS = [
    ("d5", "description", "string"),
    ("d6", "strength", "double"),
]
_LIST_SEP = "<SEP>"


def export_graphml(graph: KnowledgeGraph) -> str:
    ET.register_namespace("", _GRAPHML_NS)
    root = ET.Element(f"{{{_GRAPHML_NS}}}graphml")
    for kid, name, typ in _NODE_KEYS:
        ET.SubElement(root, f"{{{_GRAPHML_NS}}}key", {"id": kid, "for": "node", "attr.name": name, "attr.type": typ})
    for kid, name, typ in _EDGE_KEYS:
        ET.SubElement(root, f"{{{_GRAPHML_NS}}}key", {"id": kid, "for": "edge", "attr.name": name, "attr.type": typ})
    g = ET.SubElement(root, f"{{{_GRAPHML_NS}}}graph", {"id": graph.kind.value, "edgedefault": "directed"})
    for e in graph.entities.values():
        node = ET.SubElement(g, f"{{{_GRAPHML_NS}}}node", {"id": e.name})
        values = [e.entity_type, e.description, e.modality.value, _LIST_SEP.join(e.source_chunk_ids), e.image_path]
        for (kid, _, _), value in zip(_NODE_KEYS, values):
            ET.SubElement(node, f"{{{_GRAPHML_NS}}}data", {"key": kid}).text = value
    for i, r in enumerate(graph.relations):
        edge = ET.SubElement(g, f"{{{_GRAPHML_NS}}}edge", {"id": f"e{i}", "source": r.source, "target": r.target})
        ET.SubElement(edge, f"{{{_GRAPHML_NS}}}data", {"key": "d5"}).text = r.description
        ET.SubElement(edge, f"{{{_GRAPHML_NS}}}data", {"key": "d6"}).text = repr(r.strength)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode", xml_declaration=True) + "\n"


def import_graphml(text: str, kind: GraphKind = GraphKind.MMKG) -> KnowledgeGraph:
    root = ET.fromstring(text)
    ns = {"g": _GRAPHML_NS}
    graph = KnowledgeGraph(kind=kind)
    for node in root.iterfind("g:graph/g:node", ns):
        data = {d.get("key"): d.text or "" for d in node.iterfind("g:data", ns)}
        chunk_ids = data.get("d3", "")
        graph.entities[node.get("id")] = Entity(
            name=node.get("id"),
            entity_type=data.get("d0", ""),
            description=data.get("d1", ""),
            modality=data.get("d2", Modality.TEXT.value),
            source_chunk_ids=chunk_ids.split(_LIST_SEP) if chunk_ids else [],
            image_path=data.get("d4", ""),
        )
    for edge in root.iterfind("g:graph/g:edge", ns):
        data = {d.get("key"): d.text or "" for d in edge.iterfind("g:data", ns)}
        graph.relations.append(
            Relation(edge.get("source"), edge.get("target"), data.get("d5", ""), float(data.get("d6", 1.0)))
        )
    return graph
