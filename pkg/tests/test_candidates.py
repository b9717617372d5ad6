from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmkg.candidates import (
    STRATEGIES,
    CandidateConfig,
    CandidateGenerator,
    ContextPool,
    chunk_window,
    context_entity_pool,
    generate_candidates,
    kmeans_partition,
    parse_name_list,
)
from mmkg.errors import ParameterError, ValidationError
from mmkg.graph import Entity, ImageRecord, KnowledgeGraph, Modality, Relation, TextChunk
from oracles import planted_pool

VISUAL = Entity("THING IN IMAGE", "OBJECT", "seen in a picture", Modality.IMAGE_LOCAL)


def pool_from(emb, relations=(), chunk_text="ctx"):
    ents = [Entity(f"E{i}", "THING", f"entity {i}") for i in range(len(emb))]
    rels = [Relation(f"E{p}", f"E{q}", "linked", w) for p, q, w in relations]
    return ContextPool(ents, np.asarray(emb, dtype=float), (0, 2), rels, chunk_text)


def with_cosines(cosines, d=8):
    """Unit vectors whose cosine to e0 equals each value in turn."""
    rows = []
    for i, c in enumerate(cosines):
        v = np.zeros(d)
        v[0] = c
        v[1 + i % (d - 1)] = math.sqrt(max(0.0, 1 - c * c))
        rows.append(v)
    visual = np.zeros(d)
    visual[0] = 1.0
    return np.array(rows), visual


class TestWindow:
    def test_interior(self):
        assert chunk_window(3, 10, 1) == (2, 4)

    def test_clamped(self):
        assert chunk_window(0, 10, 1) == (0, 1)
        assert chunk_window(9, 10, 1) == (8, 9)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            chunk_window(10, 10)

    def test_pool_intersection_rule(self):
        chunks = {f"c{i}": TextChunk(f"c{i}", i, f"text {i}", 2) for i in range(10)}
        kg = KnowledgeGraph()
        kg.upsert(Entity("INSIDE", source_chunk_ids=["c3"]))
        kg.upsert(Entity("OUTSIDE", source_chunk_ids=["c1", "c5"]))
        kg.upsert(Entity("EDGE", source_chunk_ids=["c4", "c9"]))
        kg.upsert(Entity("PICTURE", modality=Modality.IMAGE_LOCAL, source_chunk_ids=["c3"]))
        kg.add_relation(Relation("INSIDE", "EDGE", "near", 4))
        kg.add_relation(Relation("INSIDE", "OUTSIDE", "far", 4))
        image = ImageRecord(1, "x.png", chunk_order_index=3)
        emb = {n: np.ones(3) for n in kg.entities}
        pool = context_entity_pool(kg, chunks, image, embeddings=emb)
        assert pool.names == ["INSIDE", "EDGE"]
        assert pool.window == (2, 4)
        assert [(r.source, r.target) for r in pool.relations] == [("INSIDE", "EDGE")]
        assert pool.chunk_text == "text 2\n\ntext 3\n\ntext 4"

    def test_pool_rejects_wide_window(self):
        with pytest.raises(ValidationError):
            ContextPool([], np.zeros((0, 0)), (0, 3))


class TestBaselines:
    def test_embedding_threshold_inclusive(self):
        emb, visual = with_cosines([0.9, 0.5, 0.3])
        got = generate_candidates(VISUAL, visual, pool_from(emb), "embedding")
        assert [e.name for e in got] == ["E0", "E1"]

    def test_llm_direct_validates_names(self, make_gateway):
        gw = make_gateway([{"template_id": "llm_candidates", "reply": '["NOT A MEMBER", "e1"]'}])
        emb, visual = with_cosines([0.9, 0.5, 0.3])
        diag: list[str] = []
        got = generate_candidates(VISUAL, visual, pool_from(emb), "llm_direct", gw, diag)
        assert [e.name for e in got] == ["E1"]
        assert any("NOT A MEMBER" in d for d in diag)

    def test_empty_pool(self):
        pool = ContextPool([], np.zeros((0, 0)))
        for strategy in STRATEGIES:
            assert generate_candidates(VISUAL, np.ones(4), pool, strategy) == []

    def test_pagerank_top_k_contains_seed(self):
        emb, visual = with_cosines([0.2, 0.95, 0.1, 0.3, 0.25, 0.15, 0.05, 0.12])
        rel = [(1, 3, 9), (3, 4, 9), (0, 2, 2)]
        cfg = CandidateConfig(strategy="pagerank", top_k=3)
        got = CandidateGenerator(pool_from(emb, rel), cfg).generate(VISUAL, visual)
        assert len(got.entities) == 3 and "E1" in got.names

    def test_leiden_community_of_best_match(self):
        rng = np.random.default_rng(5)
        emb, rels, visual, community = planted_pool(rng, size=6, p_edge=1.0)
        got = CandidateGenerator(pool_from(emb, rels), CandidateConfig(strategy="leiden")).generate(VISUAL, visual)
        assert got.names == [f"E{i}" for i in community]

    def test_kmeans_and_dbscan_select_matching_group(self):
        rng = np.random.default_rng(11)
        emb, rels, visual, community = planted_pool(rng, size=6)
        for strategy in ("kmeans", "dbscan"):
            got = CandidateGenerator(pool_from(emb, rels), CandidateConfig(strategy=strategy)).generate(VISUAL, visual)
            assert set(got.names) >= {f"E{i}" for i in community[:1]}
            assert set(got.names) <= {e for e in pool_from(emb).names}

    def test_parse_name_list(self):
        assert parse_name_list('Answer: ["A", "B"]') == ["A", "B"]
        assert parse_name_list("- A\n- B, C") == ["A", "B", "C"]
        assert parse_name_list("") == []


class TestSpectral:
    @pytest.mark.parametrize("seed", range(5))
    def test_planted_partition(self, seed):
        emb, rels, visual, community = planted_pool(np.random.default_rng(seed))
        result = CandidateGenerator(pool_from(emb, rels)).generate(VISUAL, visual)
        assert result.names == [f"E{i}" for i in community]
        assert not result.fallback

    def test_all_noise_falls_back(self):
        emb, visual = with_cosines([0.9, 0.8, 0.1, 0.2, 0.3, 0.4, 0.5])
        diag: list[str] = []
        cfg = CandidateConfig(eps=1e-3, min_pts=2, m_override=7)  # orthonormal rows sit sqrt(2) apart
        result = CandidateGenerator(pool_from(emb), cfg, diag=diag).generate(VISUAL, visual)
        assert result.fallback
        assert result.names == ["E0", "E1"]  # ceil(7 / 4) most similar
        assert any("fallback" in d for d in diag)

    def test_m_override_bounds(self):
        emb, visual = with_cosines([0.9, 0.8])
        with pytest.raises(ParameterError):
            CandidateGenerator(pool_from(emb), CandidateConfig(m_override=3)).generate(VISUAL, visual)
        got = CandidateGenerator(pool_from(emb), CandidateConfig(m_override=1)).generate(VISUAL, visual)
        assert got.names

    def test_llm_selection(self, make_gateway):
        emb, rels, visual, _ = planted_pool(np.random.default_rng(2), size=5)
        pool = pool_from(emb, rels)
        gw = make_gateway([{"template_id": "cluster_selection", "reply": "Group 1"}])
        result = CandidateGenerator(pool, CandidateConfig(select_mode="llm"), gw).generate(VISUAL, visual)
        assert result.selected == [1]
        assert result.names == [f"E{i}" for i in result.clusters[1]]

    def test_llm_selection_invalid_reply_uses_knn(self, make_gateway):
        emb, rels, visual, _ = planted_pool(np.random.default_rng(2), size=5)
        gw = make_gateway([{"template_id": "cluster_selection", "reply": "none of them"}])
        diag: list[str] = []
        llm = CandidateGenerator(pool_from(emb, rels), CandidateConfig(select_mode="llm"), gw, diag).generate(VISUAL, visual)
        knn = CandidateGenerator(pool_from(emb, rels)).generate(VISUAL, visual)
        assert llm.names == knn.names and diag

    def test_llm_relation_weights(self, make_gateway):
        emb, visual = with_cosines([0.9, 0.9, 0.9])
        gw = make_gateway([
            {"template_id": "relation_weight", "match": {"source": "E0"}, "reply": "9"},
            {"template_id": "relation_weight", "reply": "not sure"},
        ])
        diag: list[str] = []
        gen = CandidateGenerator(pool_from(emb, [(0, 1, 2), (1, 2, 3)]), CandidateConfig(relation_weights="llm"), gw, diag)
        A = gen.affinity.values
        assert A[0, 1] == pytest.approx(9 * emb[0] @ emb[1])
        assert A[1, 2] == pytest.approx(3 * emb[1] @ emb[2])  # stored strength on a bad reply
        assert len(diag) == 1


def test_config_validation():
    with pytest.raises(ParameterError):
        CandidateConfig(strategy="magic")
    with pytest.raises(ParameterError):
        CandidateConfig(select_mode="vote")


# -- properties ------------------------------------------------------------------


@st.composite
def random_pools(draw):
    n = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((n, 6))
    rels = [(p, q, float(rng.integers(1, 11))) for p in range(n) for q in range(n) if p < q and rng.random() < 0.3]
    return emb, rels, rng.standard_normal(6)


@settings(max_examples=60, deadline=None)
@given(random_pools(), st.sampled_from([s for s in STRATEGIES if s != "llm_direct"]))
def test_candidates_are_pool_members_and_deterministic(case, strategy):
    emb, rels, visual = case
    cfg = CandidateConfig(strategy=strategy, seed=3)
    first = CandidateGenerator(pool_from(emb, rels), cfg).generate(VISUAL, visual).names
    second = CandidateGenerator(pool_from(emb, rels), cfg).generate(VISUAL, visual).names
    assert set(first) <= set(pool_from(emb).names)
    assert first == second


@settings(max_examples=30, deadline=None)
@given(random_pools(), st.floats(0.1, 50))
def test_spectral_partition_scale_invariant(case, scale):
    emb, rels, _ = case
    a = CandidateGenerator(pool_from(emb, rels)).partition()
    b = CandidateGenerator(pool_from(emb * scale, rels)).partition()
    assert a.clusters == b.clusters and a.noise == b.noise


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 25), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_kmeans_points_nearest_their_centroid(n, k, seed):
    emb = np.random.default_rng(seed).standard_normal((n, 4))
    part = kmeans_partition(emb, k, seed)
    units = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    centroids = np.array([units[c].mean(axis=0) for c in part.clusters])
    labels = part.labels(n)
    for i in range(n):
        d = np.linalg.norm(centroids - units[i], axis=1)
        assert d[labels[i]] <= d.min() + 1e-9
    assert sorted(i for c in part.clusters for i in c) == list(range(n))
