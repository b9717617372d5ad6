from __future__ import annotations

import json

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmkg.errors import StoreParseError
from mmkg.graph import (
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
from mmkg.stores import (
    DuplicateGroup,
    alignment_from_dict,
    alignment_to_dict,
    decode_store,
    encode_store,
    export_graphml,
    import_graphml,
    load_store,
    save_store,
)

IMAGE_DATA = """{
"image_2": {
        "image_id": 2,
        "image_path": "./images/image_2.jpg",
        "caption": [],
        "footnote": [],
        "context": "Mr. Dursley was the director of a firm called Grunnings...",
        "chunk_order_index": 0,
        "chunk_id": "chunk-fb8e5b95ca964e204d9e59caeaf25f09",
        "description": "The image depicts a wall adorned with framed pictures and posters. The central frame contains a family portrait featuring two adults and a baby...",
        "segmentation": true
    }
}"""

GROUND_TRUTH = """{
"image_2": [
        {
            "merged_entity_name": "BABY IN RED HAT",
            "entity_type": "PERSON",
            "description": "A small framed picture of a baby wearing a red hat with a sad expression...",
            "source_image_entities": [
                "BABY IN RED HAT"
            ],
            "source_text_entities": [
                "DUDLEY"
            ]
        }
    ]
}"""


def canonical_json(text: str) -> str:
    return json.dumps(json.loads(text), sort_keys=True, ensure_ascii=False)


class TestDatasetRecords:
    def test_image_record_roundtrip(self, tmp_path):
        src = tmp_path / "kv_store_image_data.json"
        src.write_text(IMAGE_DATA, encoding="utf-8")
        records = load_store(src, "image_data")
        rec = records[2]
        assert rec.image_id == 2 and rec.segmentation is True
        assert rec.chunk_id == "chunk-fb8e5b95ca964e204d9e59caeaf25f09"
        assert rec.global_entity_name == "IMAGE_2"
        out = save_store(records, tmp_path / "out.json", "image_data")
        assert canonical_json(out.read_text(encoding="utf-8")) == canonical_json(IMAGE_DATA)

    def test_ground_truth_roundtrip(self, tmp_path):
        src = tmp_path / "gt.json"
        src.write_text(GROUND_TRUTH, encoding="utf-8")
        truth = load_store(src, "ground_truth")
        [merged] = truth[2]
        assert merged.source_image_entities == ["BABY IN RED HAT"]
        assert merged.source_text_entities == ["DUDLEY"]
        # usable as an alignment record
        rec = AlignmentRecord(merged.source_image_entities[0], merged.source_text_entities[0], ["DUDLEY"])
        assert rec.matched
        out = save_store(truth, tmp_path / "out.json", "ground_truth")
        assert canonical_json(out.read_text(encoding="utf-8")) == canonical_json(GROUND_TRUTH)


class TestErrors:
    def test_missing_key_named(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"image_1": {"image_path": "x.png"}}')
        with pytest.raises(StoreParseError) as info:
            load_store(path, "image_data")
        assert "image_1.image_id" in str(info.value) and str(path) in str(info.value)

    def test_bad_type_named(self):
        with pytest.raises(StoreParseError, match=r"image_3\[0\]\.source_text_entities"):
            decode_store({"image_3": [{"merged_entity_name": "X", "source_image_entities": ["X"],
                                       "source_text_entities": "Y"}]}, "ground_truth")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text("{")
        with pytest.raises(StoreParseError):
            load_store(path, "chunk_kg")

    def test_dangling_relation(self):
        doc = {"entities": [{"entity_name": "A"}], "relationships": [{"source": "A", "target": "B"}]}
        with pytest.raises(StoreParseError, match="relationships\\[0\\]"):
            decode_store(doc, "chunk_kg")

    def test_key_id_mismatch(self):
        with pytest.raises(StoreParseError):
            decode_store({"image_1": {"image_id": 2, "image_path": "x"}}, "image_data")


def test_empty_graph_roundtrip(tmp_path):
    kg = KnowledgeGraph()
    assert load_store(save_store(kg, tmp_path / "g.json", "chunk_kg"), "chunk_kg") == kg


def test_alignment_record_roundtrip():
    rec = AlignmentRecord("CAT", None, ["DOG"], "spectral", image_id=4)
    assert alignment_from_dict(alignment_to_dict(rec)) == rec


# -- randomized round-trips ---------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=20)
names = st.text("ABCDEFG XYZ", min_size=1, max_size=6).filter(lambda s: s.strip())


@st.composite
def graphs(draw, kind=GraphKind.TEXT_KG):
    kg = KnowledgeGraph(kind)
    for n in draw(st.lists(names, max_size=8, unique_by=lambda s: s.strip().upper())):
        modality = draw(st.sampled_from(list(Modality)))
        merged = modality is Modality.MERGED
        kg.upsert(Entity(
            n, draw(text), draw(text), modality,
            draw(st.lists(text, max_size=3, unique=True)),
            [n] if merged else [], ["T"] if merged else [],
            draw(text),
        ))
    keys = list(kg.entities)
    if len(keys) >= 2:
        for _ in range(draw(st.integers(0, 6))):
            a, b = draw(st.sampled_from(keys)), draw(st.sampled_from(keys))
            if a != b:
                kg.add_relation(Relation(a, b, draw(text), draw(st.floats(1, 10))))
    return kg


image_records = st.builds(
    lambda i, seg, blocks, t: ImageRecord(
        i, f"images/image_{i}.png", [t], [], t, 0, "chunk-x", t, seg,
        [(f"b{j}", f"blocks/b{j}.png") for j in range(blocks)] if seg else [],
    ),
    st.integers(1, 50), st.booleans(), st.integers(0, 3), text,
)
merged_lists = st.lists(
    st.builds(MergedEntity, names, text, text, st.lists(names, min_size=1, max_size=2), st.lists(names, min_size=1, max_size=2)),
    max_size=3,
)


def roundtrip(obj, kind):
    return decode_store(json.loads(json.dumps(encode_store(obj, kind))), kind)


@settings(max_examples=100, deadline=None)
@given(graphs())
def test_graph_store_roundtrip(kg):
    assert roundtrip(kg, "chunk_kg") == kg


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(1, 9), graphs(GraphKind.IMAGE_KG), max_size=3))
def test_image_kg_store_roundtrip(kgs):
    assert roundtrip(kgs, "image_kg") == kgs


@settings(max_examples=100, deadline=None)
@given(st.lists(image_records, max_size=4, unique_by=lambda r: r.image_id))
def test_image_data_roundtrip(recs):
    data = {r.image_id: r for r in recs}
    assert roundtrip(data, "image_data") == data


@settings(max_examples=100, deadline=None)
@given(st.lists(text, max_size=5, unique=True))
def test_text_chunks_roundtrip(contents):
    chunks = {f"chunk-{i}": TextChunk(f"chunk-{i}", i, c, len(c.split())) for i, c in enumerate(contents)}
    assert roundtrip(chunks, "text_chunks") == chunks


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(1, 9), merged_lists, max_size=3), st.sampled_from(["ground_truth", "aligned_text_entity"]))
def test_merged_stores_roundtrip(data, kind):
    assert roundtrip(data, kind) == data


@settings(max_examples=100, deadline=None)
@given(st.lists(st.builds(DuplicateGroup, names, text, text, st.lists(names, max_size=3)), max_size=4))
def test_duplicate_groups_roundtrip(groups):
    assert roundtrip(groups, "merged_entities") == groups


# -- GraphML -------------------------------------------------------------------


def parse_with_networkx(doc: str, tmp_path):
    path = tmp_path / "g.graphml"
    path.write_text(doc, encoding="utf-8")
    return nx.read_graphml(path)


def test_graphml_empty(tmp_path):
    g = parse_with_networkx(export_graphml(KnowledgeGraph()), tmp_path)
    assert g.number_of_nodes() == 0


def test_graphml_counts_and_attributes(tmp_path):
    kg = KnowledgeGraph()
    kg.upsert(Entity("A", "PERSON", "a person"))
    kg.upsert(Entity("B", "PLACE", "a place", Modality.IMAGE_LOCAL))
    kg.add_relation(Relation("A", "B", "lives in", 7))
    g = parse_with_networkx(export_graphml(kg), tmp_path)
    assert g.number_of_nodes() == 2 and g.number_of_edges() == 1
    assert g.nodes["B"]["modality"] == "image_local"
    assert g.edges["A", "B"]["strength"] == 7.0
    assert g.edges["A", "B"]["description"] == "lives in"


@pytest.mark.parametrize("seed", range(5))
def test_graphml_random_ten_nodes(seed, tmp_path):
    ref = nx.gnp_random_graph(10, 0.3, seed=seed)
    kg = KnowledgeGraph()
    for n in ref.nodes:
        kg.upsert(Entity(f"N{n}", "THING", f"node <{n}> & more"))
    for a, b in ref.edges:
        kg.add_relation(Relation(f"N{a}", f"N{b}", "linked", 3))
    doc = export_graphml(kg)
    g = parse_with_networkx(doc, tmp_path)
    assert g.number_of_nodes() == 10
    assert g.number_of_edges() == ref.number_of_edges()
    assert import_graphml(doc, GraphKind.TEXT_KG) == kg
