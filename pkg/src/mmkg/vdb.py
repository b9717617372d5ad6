"""Entity vector index used at query time."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreParseError
from .gateway import Gateway
from .graph import KnowledgeGraph
from .spectral import cosine_to
from .stores import atomic_write_text


@dataclass
class EntityIndex:
    names: list[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    model: str = ""

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def build(cls, graph: KnowledgeGraph, gateway: Gateway) -> EntityIndex:
        ents = list(graph.entities.values())
        if not ents:
            return cls([], np.zeros((0, 0)), gateway.backend.embedding_model)
        vecs = gateway.embed([e.embedding_text() for e in ents])
        return cls([e.name for e in ents], vecs, gateway.backend.embedding_model)

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        if not self.names:
            return np.zeros(0)
        return cosine_to(query_vector, self.vectors)

    def save(self, path: str | os.PathLike) -> None:
        doc = {"model": self.model, "entries": [{"name": n, "vector": v.tolist()} for n, v in zip(self.names, self.vectors)]}
        atomic_write_text(path, json.dumps(doc))

    @classmethod
    def load(cls, path: str | os.PathLike) -> EntityIndex:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            entries = doc["entries"]
            names = [e["name"] for e in entries]
            vecs = np.array([e["vector"] for e in entries], dtype=float) if entries else np.zeros((0, 0))
            return cls(names, vecs, doc.get("model", ""))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise StoreParseError(path, "entries", str(exc)) from exc
