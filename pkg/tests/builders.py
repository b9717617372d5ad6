"""Small on-disk fixtures shared by several test modules."""

from __future__ import annotations

from pathlib import Path

from mmkg.graph import Entity, GraphKind, ImageRecord, KnowledgeGraph, MergedEntity, Modality, Relation, TextChunk
from mmkg.stores import STORE_FILES, save_store

# visual entity -> text entity it depicts; None means nothing in the text matches
DOCS = {
    ("news", "storm"): {
        "text": [("HURRICANE IAN", "EVENT", "a storm that struck Florida"),
                 ("FORT MYERS", "LOCATION", "a Florida city hit by the storm")],
        "visual": {"FLOODED STREET": "FORT MYERS", "STORM SATELLITE VIEW": "HURRICANE IAN", "RED CAR": None},
    },
    ("academia", "parser"): {
        "text": [("DEPENDENCY PARSER", "METHOD", "a neural dependency parser"),
                 ("TREEBANK", "DATASET", "an annotated treebank")],
        "visual": {"PARSE TREE DIAGRAM": "DEPENDENCY PARSER"},
    },
    ("novel", "dursley"): {
        "text": [("DUDLEY", "PERSON", "the Dursleys' infant son"),
                 ("GRUNNINGS", "ORGANIZATION", "a firm that makes drills")],
        "visual": {"BABY IN RED HAT": "DUDLEY", "DRILL CATALOGUE": "GRUNNINGS"},
    },
}


def alignment_rules() -> list[dict]:
    """Mock rules answering every gold pairing correctly."""
    rules = []
    for doc in DOCS.values():
        for visual, text in doc["visual"].items():
            rules.append({"template_id": "cmel_alignment", "match": {"img_entity": visual},
                          "reply": text or "no match"})
    return rules


def write_cmel_dataset(root: str | Path, docs=DOCS) -> Path:
    root = Path(root)
    for (domain, doc_id), doc in docs.items():
        d = root / domain / doc_id
        d.mkdir(parents=True)
        chunk = TextChunk("chunk-0", 0, " ".join(desc for _, _, desc in doc["text"]), 12)
        text_kg = KnowledgeGraph(GraphKind.TEXT_KG)
        for name, etype, desc in doc["text"]:
            text_kg.upsert(Entity(name, etype, desc, source_chunk_ids=["chunk-0"]))
        names = [n for n, _, _ in doc["text"]]
        text_kg.add_relation(Relation(names[0], names[1], "related", 5))
        image_kg = KnowledgeGraph(GraphKind.IMAGE_KG)
        for visual in doc["visual"]:
            image_kg.upsert(Entity(visual, "OBJECT", visual.lower(), Modality.IMAGE_LOCAL, ["chunk-0"]))
        gold = [
            MergedEntity(text, "THING", f"{visual.lower()} shows {text.lower()}", [visual], [text])
            for visual, text in doc["visual"].items() if text
        ]
        save_store(text_kg, d / STORE_FILES["chunk_kg"], "chunk_kg")
        save_store({1: image_kg}, d / STORE_FILES["image_kg"], "image_kg")
        save_store({1: ImageRecord(1, "images/image_1.png", chunk_id="chunk-0", description="figure")},
                   d / STORE_FILES["image_data"], "image_data")
        save_store({"chunk-0": chunk}, d / STORE_FILES["text_chunks"], "text_chunks")
        save_store({1: gold}, d / STORE_FILES["ground_truth"], "ground_truth")
    return root
