"""Candidate generation: which textual entities might a visual entity link to?

The default ``spectral`` strategy clusters the context pool on the
eigen-embedding of its affinity Laplacian and keeps the clusters closest to
the visual entity. The other strategies are baselines for comparison.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import GatewayError, ParameterError, ValidationError
from .gateway import Gateway
from .graph import TEXTUAL_MODALITIES, Entity, KnowledgeGraph, Modality, Relation, TextChunk
from .img2graph import note
from .spectral import (
    ClusterPartition,
    build_affinity,
    choose_m,
    cluster_rows,
    cosine_to,
    eigengap_m,
    full_eigendecomposition,
    laplacian,
    select_clusters_knn,
    unit_rows,
)

STRATEGIES = ("spectral", "dbscan", "kmeans", "pagerank", "leiden", "embedding", "llm_direct")
SELECT_MODES = ("knn", "llm")


@dataclass
class CandidateConfig:
    strategy: str = "spectral"
    window_radius: int = 1
    eps: float | None = None
    min_pts: int = 2
    m_override: int | None = None
    sim_threshold: float = 0.5
    select_mode: str = "knn"
    delta: float = 0.05
    top_k: int | None = None  # pagerank; defaults to ceil(n / 4)
    relation_weights: str = "strength"  # or "llm"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if self.select_mode not in SELECT_MODES:
            raise ParameterError(f"unknown select mode {self.select_mode!r}")
        if self.relation_weights not in ("strength", "llm"):
            raise ParameterError(f"unknown relation weight mode {self.relation_weights!r}")
        if self.window_radius < 0:
            raise ParameterError("window_radius must be >= 0")
        if self.m_override is not None and self.m_override < 1:
            raise ParameterError("m_override must be >= 1")


@dataclass
class ContextPool:
    entities: list[Entity]
    embeddings: np.ndarray
    window: tuple[int, int] = (0, 0)
    relations: list[Relation] = field(default_factory=list)
    chunk_text: str = ""

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=float)
        self.embeddings = emb.reshape(len(self.entities), -1) if self.entities else emb.reshape(0, 0)
        if self.window[1] - self.window[0] > 2:
            raise ValidationError(f"window {self.window} spans more than 3 chunks")
        names = set(self.names)
        for r in self.relations:
            if r.source not in names or r.target not in names:
                raise ValidationError(f"pool relation {r.source!r} -> {r.target!r} leaves the pool")

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entities]

    def index(self) -> dict[str, int]:
        return {e.name: i for i, e in enumerate(self.entities)}

    def relation_triples(self, weights: Sequence[float] | None = None) -> list[tuple[int, int, float]]:
        idx = self.index()
        ws = weights if weights is not None else [r.strength for r in self.relations]
        return [(idx[r.source], idx[r.target], float(w)) for r, w in zip(self.relations, ws)]


def chunk_window(order_index: int, n_chunks: int, radius: int = 1) -> tuple[int, int]:
    if n_chunks <= 0:
        return (0, -1)
    if not 0 <= order_index < n_chunks:
        raise ValidationError(f"chunk order index {order_index} outside 0..{n_chunks - 1}")
    return (max(0, order_index - radius), min(n_chunks - 1, order_index + radius))


def context_entity_pool(
    text_kg: KnowledgeGraph,
    chunks: Mapping[str, TextChunk],
    image,
    gateway: Gateway | None = None,
    window_radius: int = 1,
    *,
    embeddings: Mapping[str, np.ndarray] | None = None,
) -> ContextPool:
    """Textual entities sourced from chunks within ``window_radius`` of the image's chunk.

    Embeddings come from ``embeddings`` when supplied, else from ``gateway``.
    """
    lo, hi = chunk_window(image.chunk_order_index, len(chunks), window_radius)
    ordered = sorted(chunks.values(), key=lambda c: c.order_index)
    in_window = [c for c in ordered if lo <= c.order_index <= hi]
    window_ids = {c.chunk_id for c in in_window}
    members = [
        e for e in text_kg.entities.values()
        if e.modality in TEXTUAL_MODALITIES and window_ids.intersection(e.source_chunk_ids)
    ]
    names = {e.name for e in members}
    relations = [r for r in text_kg.relations if r.source in names and r.target in names]
    if not members:
        vecs = np.zeros((0, 0))
    elif embeddings is not None:
        vecs = np.array([embeddings[e.name] for e in members], dtype=float)
    elif gateway is not None:
        vecs = gateway.embed([e.embedding_text() for e in members])
    else:
        raise ValidationError("context_entity_pool needs a gateway or precomputed embeddings")
    chunk_text = "\n\n".join(c.content for c in in_window)
    return ContextPool(members, vecs, (lo, hi), relations, chunk_text)


def llm_relation_weights(
    pool: ContextPool, gateway: Gateway, diag: list[str] | None = None
) -> list[float]:
    """Ask the model to score each pool relation on [1, 10]; stored strength on failure."""
    out = []
    for r in pool.relations:
        bindings = {"source": r.source, "target": r.target, "description": r.description, "context": pool.chunk_text}
        try:
            reply = gateway.chat("relation_weight", bindings)
        except GatewayError as exc:
            note(diag, f"relation weight for {r.source}->{r.target}: {exc}")
            out.append(r.strength)
            continue
        m = re.search(r"-?\d+(?:\.\d+)?", reply)
        value = float(m.group()) if m else float("nan")
        if not 1.0 <= value <= 10.0:
            note(diag, f"relation weight for {r.source}->{r.target}: unusable reply {reply[:40]!r}")
            value = r.strength
        out.append(value)
    return out


@dataclass
class CandidateResult:
    entities: list[Entity]
    strategy: str
    clusters: list[list[int]] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)
    fallback: bool = False

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entities]


class CandidateGenerator:
    """Per-pool candidate generator.

    Structures that do not depend on the visual entity (affinity, spectral
    partition, clusterings) are computed once and reused for every query.
    """

    def __init__(
        self,
        pool: ContextPool,
        config: CandidateConfig = CandidateConfig(),
        gateway: Gateway | None = None,
        diag: list[str] | None = None,
    ):
        self.pool = pool
        self.config = config
        self.gateway = gateway
        self.diag = diag
        self._partition: ClusterPartition | None = None
        self._affinity = None
        self.m: int | None = None
        self.eigenvalues: np.ndarray | None = None

    # -- shared structure --------------------------------------------------

    @property
    def affinity(self):
        if self._affinity is None:
            weights = None
            if self.config.relation_weights == "llm" and self.gateway is not None:
                weights = llm_relation_weights(self.pool, self.gateway, self.diag)
            self._affinity = build_affinity(self.pool.embeddings, self.pool.relation_triples(weights), self.pool.names)
            for d in self._affinity.diagnostics:
                note(self.diag, d)
        return self._affinity

    def partition(self) -> ClusterPartition:
        if self._partition is None:
            self._partition = self._build_partition()
        return self._partition

    def _build_partition(self) -> ClusterPartition:
        n = len(self.pool)
        cfg = self.config
        if cfg.strategy == "spectral":
            _, L = laplacian(self.affinity)
            vals, vecs = full_eigendecomposition(L)
            if cfg.m_override is not None:
                if cfg.m_override > n:
                    raise ParameterError(f"m_override {cfg.m_override} exceeds pool size {n}")
                m = cfg.m_override
            else:
                m = eigengap_m(vals, choose_m(n))
            self.m, self.eigenvalues = m, vals[:m]
            return cluster_rows(vecs[:, :m], cfg.eps, cfg.min_pts)
        if cfg.strategy == "dbscan":
            units, _ = unit_rows(self.pool.embeddings)
            return cluster_rows(units, cfg.eps, cfg.min_pts)
        if cfg.strategy == "kmeans":
            return kmeans_partition(self.pool.embeddings, choose_m(n), cfg.seed)
        raise ParameterError(f"strategy {cfg.strategy!r} does not use a partition")

    # -- query ------------------------------------------------------------

    def generate(self, visual: Entity, visual_embedding: np.ndarray) -> CandidateResult:
        cfg = self.config
        n = len(self.pool)
        if n == 0:
            return CandidateResult([], cfg.strategy)
        sims = cosine_to(visual_embedding, self.pool.embeddings)
        if cfg.strategy == "embedding":
            keep = [i for i in range(n) if sims[i] >= cfg.sim_threshold - 1e-12]
            return self._result(keep)
        if cfg.strategy == "llm_direct":
            return self._result(self._llm_direct(visual))
        if cfg.strategy == "pagerank":
            return self._result(self._pagerank(sims))
        if cfg.strategy == "leiden":
            return self._result(self._leiden(sims))

        part = self.partition()
        selected = self._select(visual, visual_embedding, part)
        keep = sorted({i for c in selected for i in part.clusters[c]})
        if not keep:
            note(self.diag, f"{visual.name}: no cluster selected; using nearest-entity fallback")
            return self._result(self._fallback(sims), part, [], fallback=True)
        return self._result(keep, part, selected)

    def _result(self, keep, part: ClusterPartition | None = None, selected=(), fallback=False) -> CandidateResult:
        return CandidateResult(
            [self.pool.entities[i] for i in keep],
            self.config.strategy,
            part.clusters if part else [],
            list(selected),
            fallback,
        )

    def _fallback(self, sims: np.ndarray) -> list[int]:
        k = math.ceil(len(sims) / 4)
        order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
        return sorted(order[:k])

    def _select(self, visual: Entity, visual_embedding: np.ndarray, part: ClusterPartition) -> list[int]:
        knn = select_clusters_knn(visual_embedding, self.pool.embeddings, part, self.config.delta)
        if self.config.select_mode == "knn" or not part.clusters or self.gateway is None:
            return knn
        summary = "\n".join(
            f"Group {c}: " + "; ".join(f"{self.pool.entities[i].name} ({self.pool.entities[i].description[:80]})" for i in members)
            for c, members in enumerate(part.clusters)
        )
        bindings = {"img_entity": visual.name, "img_entity_description": visual.description, "clusters": summary}
        try:
            reply = self.gateway.chat("cluster_selection", bindings)
        except GatewayError as exc:
            note(self.diag, f"{visual.name}: cluster selection failed ({exc}); using knn")
            return knn
        ids = sorted({int(t) for t in re.findall(r"\d+", reply) if int(t) < len(part.clusters)})
        if not ids:
            note(self.diag, f"{visual.name}: cluster selection reply {reply[:40]!r} names no group; using knn")
            return knn
        return ids

    def _graph_weights(self) -> dict[tuple[int, int], float]:
        A = self.affinity.values
        out: dict[tuple[int, int], float] = {}
        for p, q, _ in self.pool.relation_triples():
            if p != q:
                key = (min(p, q), max(p, q))
                out[key] = float(A[p, q])
        return out

    def _pagerank(self, sims: np.ndarray) -> list[int]:
        import networkx as nx

        n = len(sims)
        seed = int(np.argmax(sims))
        g = nx.Graph()
        g.add_nodes_from(range(n))
        for (p, q), w in self._graph_weights().items():
            g.add_edge(p, q, weight=w)
        personalization = {i: (1.0 if i == seed else 0.0) for i in range(n)}
        ranks = nx.pagerank(g, personalization=personalization, weight="weight")
        k = self.config.top_k or math.ceil(n / 4)
        order = sorted(range(n), key=lambda i: (-round(ranks[i], 12), i))
        return sorted(order[:k])

    def _leiden(self, sims: np.ndarray) -> list[int]:
        import igraph as ig
        import leidenalg

        n = len(sims)
        seed = int(np.argmax(sims))
        weights = self._graph_weights()
        edges = [e for e, w in weights.items() if w > 0]
        g = ig.Graph(n=n, edges=edges)
        part = leidenalg.find_partition(
            g,
            leidenalg.ModularityVertexPartition,
            weights=[weights[e] for e in edges] or None,
            seed=self.config.seed % 2**31,
        )
        return sorted(i for i in range(n) if part.membership[i] == part.membership[seed])

    def _llm_direct(self, visual: Entity) -> list[int]:
        if self.gateway is None:
            raise ValidationError("llm_direct strategy needs a gateway")
        listing = "\n".join(f"- {e.name}: {e.description}" for e in self.pool.entities)
        bindings = {
            "img_entity": visual.name,
            "img_entity_description": visual.description,
            "chunk_text": self.pool.chunk_text,
            "pool": listing,
        }
        try:
            reply = self.gateway.chat("llm_candidates", bindings)
        except GatewayError as exc:
            note(self.diag, f"{visual.name}: llm candidate call failed ({exc})")
            return []
        idx = self.pool.index()
        keep = set()
        for name in parse_name_list(reply):
            key = name.strip().upper()
            if key in idx:
                keep.add(idx[key])
            else:
                note(self.diag, f"{visual.name}: llm candidate {name!r} is not in the pool")
        return sorted(keep)


def parse_name_list(reply: str) -> list[str]:
    """Names from a JSON list reply, falling back to one name per line or comma."""
    text = reply.strip()
    start, end = text.find("["), text.rfind("]")
    if 0 <= start < end:
        try:
            items = json.loads(text[start : end + 1])
            if isinstance(items, list):
                return [str(x) for x in items if isinstance(x, (str, int, float))]
        except json.JSONDecodeError:
            pass
    parts = re.split(r"[\n,]", text)
    return [p.strip(" -*\"'`") for p in parts if p.strip(" -*\"'`")]


def kmeans_partition(embeddings: np.ndarray, k: int, seed: int = 0) -> ClusterPartition:
    from sklearn.cluster import KMeans

    units, _ = unit_rows(embeddings)
    n = len(units)
    k = max(1, min(k, n))
    labels = KMeans(n_clusters=k, n_init=10, tol=0.0, random_state=seed % 2**32).fit_predict(units)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return ClusterPartition(sorted(groups.values(), key=lambda c: c[0]), [])


def generate_candidates(
    visual: Entity,
    visual_embedding: np.ndarray,
    pool: ContextPool,
    strategy: str | CandidateConfig = "spectral",
    gateway: Gateway | None = None,
    diag: list[str] | None = None,
) -> list[Entity]:
    config = strategy if isinstance(strategy, CandidateConfig) else CandidateConfig(strategy=strategy)
    return CandidateGenerator(pool, config, gateway, diag).generate(visual, visual_embedding).entities


def visual_entities(ikg: KnowledgeGraph) -> list[Entity]:
    """Scene-graph entities eligible for linking (blocks and the global node excluded)."""
    return ikg.by_modality(Modality.IMAGE_LOCAL)
