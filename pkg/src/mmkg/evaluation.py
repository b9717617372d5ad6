"""Cross-modal linking benchmark: dataset loading, scoring and result tables.

Dataset layout, one directory per document::

    <root>/<domain>/<doc_id>/kv_store_chunk_knowledge_graph.json
                             kv_store_image_knowledge_graph.json
                             kv_store_image_data.json
                             kv_store_text_chunks.json
                             ground_truth.json   (or aligned_text_entity.json)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from .candidates import CandidateConfig, CandidateGenerator, context_entity_pool
from .errors import InputError, MMKGError
from .fusion import align_entity
from .gateway import Gateway
from .graph import AlignmentRecord, Entity, Modality, MergedEntity, canonical_name
from .img2graph import note
from .stores import STORE_FILES, load_store

log = logging.getLogger(__name__)

DOMAINS = ("news", "academia", "novel")
REQUIRED = ("chunk_kg", "image_kg", "image_data", "text_chunks")


@dataclass
class DocumentCase:
    doc_id: str
    domain: str
    path: Path

    def gold_file(self) -> Path:
        gt = self.path / STORE_FILES["ground_truth"]
        return gt if gt.exists() else self.path / STORE_FILES["aligned_text_entity"]

    def missing(self) -> list[str]:
        out = [STORE_FILES[k] for k in REQUIRED if not (self.path / STORE_FILES[k]).exists()]
        if not self.gold_file().exists():
            out.append(STORE_FILES["ground_truth"])
        return out

    def load(self) -> dict:
        return {
            "text_kg": load_store(self.path / STORE_FILES["chunk_kg"], "chunk_kg"),
            "image_kgs": load_store(self.path / STORE_FILES["image_kg"], "image_kg"),
            "images": load_store(self.path / STORE_FILES["image_data"], "image_data"),
            "chunks": load_store(self.path / STORE_FILES["text_chunks"], "text_chunks"),
            "ground_truth": load_store(self.gold_file(), "ground_truth"),
        }


@dataclass
class CmelDataset:
    root: Path
    documents: list[DocumentCase] = field(default_factory=list)

    @classmethod
    def load(cls, root: str | Path) -> CmelDataset:
        root = Path(root)
        if not root.is_dir():
            raise InputError(f"dataset directory not found: {root}")
        docs = []
        for domain_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for doc_dir in sorted(p for p in domain_dir.iterdir() if p.is_dir()):
                docs.append(DocumentCase(doc_dir.name, domain_dir.name, doc_dir))
        if not docs:
            raise InputError(f"no documents under {root} (expected <domain>/<doc_id>/ directories)")
        return cls(root, docs)


@dataclass
class EvalResult:
    per_document: dict[str, tuple[int, int]] = field(default_factory=dict)
    domains: dict[str, str] = field(default_factory=dict)
    excluded: dict[str, str] = field(default_factory=dict)

    def _docs(self, domain: str | None) -> list[str]:
        return [d for d in self.per_document if domain is None or self.domains.get(d) == domain]

    def micro_exact(self, domain: str | None = None) -> Fraction:
        docs = self._docs(domain)
        total = sum(self.per_document[d][1] for d in docs)
        if total == 0:
            return Fraction(0)
        return Fraction(sum(self.per_document[d][0] for d in docs), total)

    def macro_exact(self, domain: str | None = None) -> Fraction:
        docs = [d for d in self._docs(domain) if self.per_document[d][1] > 0]
        if not docs:
            return Fraction(0)
        return sum((Fraction(*self.per_document[d]) for d in docs), Fraction(0)) / len(docs)

    @property
    def overall(self) -> tuple[float, float]:
        return float(self.micro_exact()), float(self.macro_exact())

    @property
    def per_domain(self) -> dict[str, tuple[float, float]]:
        doms = sorted(set(self.domains.values()), key=lambda d: (DOMAINS.index(d) if d in DOMAINS else len(DOMAINS), d))
        return {d: (float(self.micro_exact(d)), float(self.macro_exact(d))) for d in doms}

    def to_dict(self) -> dict:
        return {
            "overall": {"micro": self.overall[0], "macro": self.overall[1]},
            "per_domain": {d: {"micro": mi, "macro": ma} for d, (mi, ma) in self.per_domain.items()},
            "per_document": {
                d: {"domain": self.domains.get(d, ""), "correct": c, "total": t}
                for d, (c, t) in self.per_document.items()
            },
            "excluded": dict(self.excluded),
        }


def gold_pairs(ground_truth: Mapping[int, Sequence[MergedEntity]]) -> dict[tuple[int, str], set[str]]:
    """``(image_id, IMAGE ENTITY) -> {TEXT ENTITY, ...}`` from merged-entity records."""
    out: dict[tuple[int, str], set[str]] = {}
    for image_id, items in ground_truth.items():
        for m in items:
            for img in m.source_image_entities:
                out.setdefault((image_id, canonical_name(img)), set()).update(
                    canonical_name(t) for t in m.source_text_entities
                )
    return out


def score_document(
    predictions: Sequence[AlignmentRecord],
    ground_truth: Mapping[int, Sequence[MergedEntity]],
    scope: set[tuple[int, str]] | None = None,
    diag: list[str] | None = None,
) -> tuple[int, int]:
    """``(correct, total)`` for one document.

    ``scope`` lists the visual entities that may be predicted for; it defaults
    to the gold-paired entities. An in-scope entity absent from the gold pairs
    is expected to be NoMatch.
    """
    gold = gold_pairs(ground_truth)
    scope = set(gold) if scope is None else set(scope) | set(gold)
    correct = 0
    for rec in predictions:
        name = canonical_name(rec.image_entity)
        if rec.image_id is not None:
            keys = [(rec.image_id, name)]
        else:
            keys = sorted(k for k in scope if k[1] == name)
        keys = [k for k in keys if k in scope]
        if not keys:
            note(diag, f"prediction for unknown image entity {rec.image_entity!r} counted as wrong")
            continue
        truth: set[str] = set().union(*(gold.get(k, set()) for k in keys))
        if rec.text_entity is None:
            correct += not truth
        else:
            correct += canonical_name(rec.text_entity) in truth
    return correct, len(predictions)


def evaluate_alignment(
    predictions: Mapping[str, Sequence[AlignmentRecord]],
    ground_truth: Mapping[str, Mapping[int, Sequence[MergedEntity]]],
    domains: Mapping[str, str] | None = None,
    scopes: Mapping[str, set[tuple[int, str]]] | None = None,
    diag: list[str] | None = None,
) -> EvalResult:
    result = EvalResult(domains=dict(domains or {}))
    for doc_id, preds in predictions.items():
        scope = scopes.get(doc_id) if scopes else None
        result.per_document[doc_id] = score_document(preds, ground_truth.get(doc_id, {}), scope, diag)
        result.domains.setdefault(doc_id, "")
    return result


def predict_document(data: dict, gateway: Gateway, config: CandidateConfig, diag: list[str] | None = None) -> list[AlignmentRecord]:
    """Generate candidates and link every gold-paired visual entity of one document."""
    preds: list[AlignmentRecord] = []
    text_kg, chunks = data["text_kg"], data["chunks"]
    for image_id in sorted(data["ground_truth"]):
        image = data["images"].get(image_id)
        if image is None:
            note(diag, f"ground truth references unknown image {image_id}")
            continue
        ikg = data["image_kgs"].get(image_id)
        pool = context_entity_pool(text_kg, chunks, image, gateway, config.window_radius)
        generator = CandidateGenerator(pool, config, gateway, diag)
        visuals: list[Entity] = []
        for m in data["ground_truth"][image_id]:
            for img_name in m.source_image_entities:
                ent = ikg.get(img_name) if ikg is not None else None
                if ent is None:
                    ent = Entity(img_name, m.entity_type, m.description, Modality.IMAGE_LOCAL)
                if ent.name not in {v.name for v in visuals}:
                    visuals.append(ent)
        if not visuals:
            continue
        vecs = gateway.embed([v.embedding_text() for v in visuals])
        for v, vec in zip(visuals, vecs):
            cands = generator.generate(v, vec)
            preds.append(
                align_entity(v, cands.entities, pool.chunk_text, gateway,
                             method=config.strategy, image_id=image_id, diag=diag)
            )
    return preds


def run_benchmark(
    dataset: CmelDataset,
    gateway: Gateway,
    config: CandidateConfig = CandidateConfig(),
    *,
    runs: int = 1,
    reduce: str = "max",
    diag: list[str] | None = None,
) -> EvalResult:
    """Evaluate every document; with ``runs > 1`` keep the best overall-micro run."""
    if runs < 1:
        raise InputError("runs must be >= 1")
    if reduce not in ("max", "mean"):
        raise InputError(f"unknown reduce mode {reduce!r}")
    results = [_single_run(dataset, gateway, config, diag) for _ in range(runs)]
    if reduce == "max" or runs == 1:
        return max(results, key=lambda r: r.micro_exact())
    merged = EvalResult(domains=results[0].domains, excluded=results[0].excluded)
    for doc in results[0].per_document:
        merged.per_document[doc] = (
            sum(r.per_document[doc][0] for r in results),
            sum(r.per_document[doc][1] for r in results),
        )
    return merged


def _single_run(dataset: CmelDataset, gateway: Gateway, config: CandidateConfig, diag) -> EvalResult:
    result = EvalResult()
    for doc in dataset.documents:
        missing = doc.missing()
        if missing:
            result.excluded[doc.doc_id] = "missing " + ", ".join(missing)
            note(diag, f"document {doc.doc_id} excluded: missing {', '.join(missing)}")
            continue
        try:
            data = doc.load()
            preds = predict_document(data, gateway, config, diag)
        except (MMKGError, OSError) as exc:
            result.excluded[doc.doc_id] = str(exc)
            note(diag, f"document {doc.doc_id} excluded: {exc}")
            continue
        result.per_document[doc.doc_id] = score_document(preds, data["ground_truth"], None, diag)
        result.domains[doc.doc_id] = doc.domain
    return result


def format_table(rows: Mapping[str, EvalResult]) -> str:
    """Plain-text table: one row per method, micro/macro percentages per domain and overall."""
    present = []
    for res in rows.values():
        for d in res.per_domain:
            if d not in present:
                present.append(d)
    domains = [d for d in DOMAINS if d in present] + [d for d in present if d not in DOMAINS]
    cols = [d.capitalize() for d in domains] + ["Overall"]
    head1 = f"{'Method':<16}" + "".join(f"{c:^16}" for c in cols)
    head2 = f"{'':<16}" + "".join(f"{'Micro':>8}{'Macro':>8}" for _ in cols)
    lines = [head1, head2, "-" * len(head2)]
    for method, res in rows.items():
        cells = []
        for d in domains:
            if d in res.per_domain:
                mi, ma = res.per_domain[d]
                cells.append(f"{100 * mi:>8.1f}{100 * ma:>8.1f}")
            else:
                cells.append(f"{'-':>8}{'-':>8}")
        mi, ma = res.overall
        cells.append(f"{100 * mi:>8.1f}{100 * ma:>8.1f}")
        lines.append(f"{method:<16}" + "".join(cells))
    if any(res.excluded for res in rows.values()):
        lines.append("")
        for method, res in rows.items():
            for doc, why in res.excluded.items():
                lines.append(f"excluded ({method}) {doc}: {why}")
    return "\n".join(lines)
