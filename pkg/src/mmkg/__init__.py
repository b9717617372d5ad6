"""Multimodal knowledge graphs: build image and text graphs, link entities across
modalities, fuse them, and answer questions over the result."""

from .candidates import CandidateConfig, CandidateGenerator, ContextPool, context_entity_pool, generate_candidates
from .errors import (
    GatewayError,
    InputError,
    MMKGError,
    NotFoundError,
    ParameterError,
    PrerequisiteError,
    StoreParseError,
    TemplateError,
    ValidationError,
)
from .fusion import FusionReport, align_entity, build_mmkg, fuse_image, fuse_pair
from .gateway import DecodingParams, Gateway, HTTPBackend, MockBackend, MockRule, ModelEndpoint
from .generation import GenerationTrace, answer
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
    merge_entities,
    neighbors,
    upsert_entity,
)
from .img2graph import image_to_graph
from .records import EntityRecord, RecordGrammar, RelationshipRecord, parse_records, serialize_records
from .retrieval import ContextBundle, RetrievalConfig, retrieve
from .stores import export_graphml, import_graphml, load_store, save_store

__version__ = "0.1.0"
