"""Workspace directory layout and manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .candidates import CandidateConfig
from .errors import InputError, PrerequisiteError, ValidationError
from .gateway import EmbeddingCache, Gateway, HTTPBackend, MockBackend, ModelEndpoint
from .records import RecordGrammar
from .retrieval import RetrievalConfig
from .stores import STORE_FILES

MANIFEST = "manifest.json"


@dataclass
class WorkspaceManifest:
    document_id: str = "document"
    source_text: str = "document.md"
    chunk_size: int = 500
    seed: int = 0
    grammar: dict[str, str] = field(default_factory=dict)
    models: dict[str, dict[str, Any]] = field(default_factory=dict)
    mock_fixture: str = ""
    candidates: dict[str, Any] = field(default_factory=dict)
    retrieval: dict[str, Any] = field(default_factory=dict)
    samples_per_image: int = 1
    entity_types: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.chunk_size < 1:
            raise ValidationError("chunk_size must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> WorkspaceManifest:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValidationError(f"unknown manifest key(s): {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Workspace:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        path = self.root / MANIFEST
        if path.exists():
            try:
                self.manifest = WorkspaceManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON: {exc}") from exc
        else:
            self.manifest = WorkspaceManifest()

    def store(self, kind: str) -> Path:
        return self.root / STORE_FILES[kind]

    def require(self, stage: str, *kinds: str) -> None:
        missing = [STORE_FILES[k] for k in kinds if not self.store(k).exists()]
        if missing:
            raise PrerequisiteError(stage, missing)

    @property
    def vdb_path(self) -> Path:
        return self.root / "kv_store_vdb.json"

    @property
    def graphml_path(self) -> Path:
        return self.root / "mmkg.graphml"

    @property
    def markers_dir(self) -> Path:
        return self.root / "fusion_done"

    @property
    def reports_dir(self) -> Path:
        return self.root / "fusion_reports"

    @property
    def traces_dir(self) -> Path:
        return self.root / "traces"

    def marker(self, image_id: int) -> Path:
        return self.markers_dir / f"image_{image_id}.done"

    def grammar(self) -> RecordGrammar:
        return RecordGrammar.from_dict(self.manifest.grammar)

    def candidate_config(self, **overrides: Any) -> CandidateConfig:
        opts = {"seed": self.manifest.seed, **self.manifest.candidates}
        opts.update({k: v for k, v in overrides.items() if v is not None})
        return CandidateConfig(**opts)

    def retrieval_config(self, **overrides: Any) -> RetrievalConfig:
        opts = dict(self.manifest.retrieval)
        opts.update({k: v for k, v in overrides.items() if v is not None})
        return RetrievalConfig(**opts)

    def gateway(self, *, mock: bool, seed: int | None = None) -> Gateway:
        seed = self.manifest.seed if seed is None else seed
        if mock:
            fixture = self.root / self.manifest.mock_fixture if self.manifest.mock_fixture else None
            backend = MockBackend.from_fixture(fixture, seed) if fixture and fixture.is_file() else MockBackend(seed)
        else:
            models = self.manifest.models
            if "llm" not in models or "embedding" not in models:
                raise InputError("manifest needs models.llm and models.embedding endpoints (or pass --mock)")
            backend = HTTPBackend(
                ModelEndpoint.from_dict(models["llm"]),
                ModelEndpoint.from_dict(models["embedding"]),
                ModelEndpoint.from_dict(models["mllm"]) if "mllm" in models else None,
            )
        llm = self.manifest.models.get("llm", {})
        return Gateway(
            backend,
            cache=EmbeddingCache(self.root / "embedding_cache.jsonl"),
            transcript_path=self.root / "transcript.ndjson",
            max_retries=int(llm.get("max_retries", 2)),
        )
