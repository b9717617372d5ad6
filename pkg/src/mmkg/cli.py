"""Command-line frontend: ``mmkg <stage> [options]`` over a workspace directory.

Exit codes: 0 success, 1 fatal error, 2 finished with diagnostics.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from .candidates import SELECT_MODES, STRATEGIES
from .errors import MMKGError
from .evaluation import CmelDataset, format_table, run_benchmark
from .fusion import build_mmkg
from .generation import answer
from .graph import MergedEntity
from .img2graph import build_image_kgs
from .retrieval import retrieve
from .stores import atomic_write_text, dump_json, export_graphml, load_store, save_store
from .text2graph import apply_duplicate_groups, chunk_text, extract_text_kg, suggest_duplicates
from .vdb import EntityIndex
from .workspace import Workspace

log = logging.getLogger("mmkg")

EXIT_OK, EXIT_FATAL, EXIT_DIAGNOSTICS = 0, 1, 2


def _finish(diag: list[str]) -> int:
    for d in diag:
        print(f"warning: {d}", file=sys.stderr)
    return EXIT_DIAGNOSTICS if diag else EXIT_OK


def _gateway(ws: Workspace, args):
    return ws.gateway(mock=args.mock, seed=args.seed)


def cmd_index_text(ws: Workspace, args) -> int:
    diag: list[str] = []
    gw = _gateway(ws, args)
    if args.apply_merges:
        ws.require("index-text", "chunk_kg", "merged_entities")
        kg = load_store(ws.store("chunk_kg"), "chunk_kg")
        apply_duplicate_groups(kg, load_store(ws.store("merged_entities"), "merged_entities"), diag)
        save_store(kg, ws.store("chunk_kg"), "chunk_kg")
        return _finish(diag)
    source = Path(args.input) if args.input else ws.root / ws.manifest.source_text
    if not source.is_file():
        raise MMKGError(f"source text not found: {source}")
    chunks = chunk_text(source.read_text(encoding="utf-8"), args.chunk_size or ws.manifest.chunk_size)
    types = ws.manifest.entity_types or None
    kwargs = {"entity_types": types} if types else {}
    kg = extract_text_kg(chunks, gw, ws.grammar(), diag=diag, **kwargs)
    save_store({c.chunk_id: c for c in chunks}, ws.store("text_chunks"), "text_chunks")
    save_store(kg, ws.store("chunk_kg"), "chunk_kg")
    if args.suggest_duplicates:
        groups = suggest_duplicates(kg, {c.chunk_id: c for c in chunks}, gw, diag=diag)
        save_store(groups, ws.store("merged_entities"), "merged_entities")
    print(f"{len(chunks)} chunks, {len(kg)} entities, {len(kg.relations)} relations")
    return _finish(diag)


def cmd_img2graph(ws: Workspace, args) -> int:
    ws.require("img2graph", "image_data")
    diag: list[str] = []
    images = load_store(ws.store("image_data"), "image_data")
    types = ws.manifest.entity_types or None
    kwargs = {"entity_types": types} if types else {}
    kgs = build_image_kgs(images.values(), _gateway(ws, args), ws.grammar(), base_dir=ws.root, diag=diag, **kwargs)
    save_store(kgs, ws.store("image_kg"), "image_kg")
    save_store(images, ws.store("image_data"), "image_data")
    print(f"{len(kgs)} of {len(images)} images converted")
    return _finish(diag)


def cmd_fuse(ws: Workspace, args) -> int:
    ws.require("fuse", "chunk_kg", "text_chunks", "image_data", "image_kg")
    text_kg = load_store(ws.store("chunk_kg"), "chunk_kg")
    chunks = load_store(ws.store("text_chunks"), "text_chunks")
    images = load_store(ws.store("image_data"), "image_data")
    image_kgs = load_store(ws.store("image_kg"), "image_kg")
    gw = _gateway(ws, args)
    config = ws.candidate_config(
        strategy=args.strategy, window_radius=args.window_radius, eps=args.eps, min_pts=args.min_pts,
        m_override=args.m_override, sim_threshold=args.sim_threshold, select_mode=args.select_mode,
    )

    start = None
    done: set[int] = set()
    if args.resume and ws.store("mmkg").exists():
        start = load_store(ws.store("mmkg"), "mmkg")
        done = {i for i in images if ws.marker(i).exists()}
    else:
        shutil.rmtree(ws.markers_dir, ignore_errors=True)
    todo = [im for i, im in sorted(images.items()) if i not in done]
    if args.limit is not None:
        todo = todo[: args.limit]

    aligned: dict[int, list[MergedEntity]] = {}
    if args.resume and ws.store("aligned_text_entity").exists():
        aligned = load_store(ws.store("aligned_text_entity"), "aligned_text_entity")

    def checkpoint(image_id, mmkg, report):
        if report.skipped:
            return
        aligned[image_id] = report.merged
        save_store(mmkg, ws.store("mmkg"), "mmkg")
        save_store(aligned, ws.store("aligned_text_entity"), "aligned_text_entity")
        atomic_write_text(ws.reports_dir / f"image_{image_id}.json", dump_json(report.to_dict()))
        atomic_write_text(ws.marker(image_id), "done\n")

    result = build_mmkg(text_kg, image_kgs, todo, chunks, gw, config, start=start, on_image_done=checkpoint)
    save_store(result.mmkg, ws.store("mmkg"), "mmkg")
    result.vdb.save(ws.vdb_path)
    atomic_write_text(ws.graphml_path, export_graphml(result.mmkg))
    fused = [r.image_id for r in result.reports if not r.skipped]
    print(f"fused images {fused}; graph has {len(result.mmkg)} entities, {len(result.mmkg.relations)} relations")
    return _finish(result.diagnostics)


def _load_query_inputs(ws: Workspace, stage: str):
    ws.require(stage, "mmkg", "text_chunks")
    if not ws.vdb_path.exists():
        raise MMKGError(f"stage {stage!r} requires missing artifact(s): {ws.vdb_path.name}")
    return (
        load_store(ws.store("mmkg"), "mmkg"),
        EntityIndex.load(ws.vdb_path),
        load_store(ws.store("text_chunks"), "text_chunks"),
    )


def cmd_retrieve(ws: Workspace, args) -> int:
    mmkg, vdb, chunks = _load_query_inputs(ws, "retrieve")
    cfg = ws.retrieval_config(top_k_entities=args.top_k, entity_relation_token_budget=args.budget, max_chunks=args.max_chunks)
    bundle = retrieve(args.query, mmkg, vdb, _gateway(ws, args), chunks, cfg)
    print(json.dumps(bundle.to_dict(), indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_query(ws: Workspace, args) -> int:
    mmkg, vdb, chunks = _load_query_inputs(ws, "query")
    gw = _gateway(ws, args)
    cfg = ws.retrieval_config(top_k_entities=args.top_k, entity_relation_token_budget=args.budget, max_chunks=args.max_chunks)
    bundle = retrieve(args.question, mmkg, vdb, gw, chunks, cfg)
    samples = args.samples or ws.manifest.samples_per_image
    trace = answer(args.question, bundle, gw, samples_per_image=samples, base_dir=ws.root)
    digest = hashlib.sha256(args.question.encode("utf-8")).hexdigest()[:12]
    atomic_write_text(ws.traces_dir / f"query-{digest}.json", dump_json({"bundle": bundle.to_dict(), "trace": trace.to_dict()}))
    print(trace.final)
    return _finish(trace.errors)


def cmd_eval(ws: Workspace, args) -> int:
    diag: list[str] = []
    dataset = CmelDataset.load(args.dataset)
    config = ws.candidate_config(
        strategy=args.strategy, window_radius=args.window_radius, eps=args.eps, min_pts=args.min_pts,
        m_override=args.m_override, sim_threshold=args.sim_threshold, select_mode=args.select_mode,
    )
    result = run_benchmark(dataset, _gateway(ws, args), config, runs=args.runs, reduce=args.reduce, diag=diag)
    label = config.strategy if config.strategy not in ("spectral", "dbscan", "kmeans") else f"{config.strategy}-{config.select_mode}"
    table = format_table({label: result})
    out = Path(args.output) if args.output else ws.root / "eval_result.json"
    atomic_write_text(out, dump_json({"method": label, **result.to_dict()}))
    atomic_write_text(out.with_suffix(".txt"), table + "\n")
    print(table)
    return _finish(diag)


def cmd_export_graphml(ws: Workspace, args) -> int:
    kind = args.store
    ws.require("export-graphml", kind)
    graph = load_store(ws.store(kind), kind)
    out = Path(args.output) if args.output else ws.root / f"{kind}.graphml"
    atomic_write_text(out, export_graphml(graph))
    print(out)
    return EXIT_OK


def cmd_demo(ws: Workspace, args) -> int:
    dest = Path(args.dest)
    if dest.exists() and any(dest.iterdir()):
        raise MMKGError(f"destination {dest} is not empty")
    with resources.as_file(resources.files("mmkg") / "demo") as src:
        shutil.copytree(src, dest, dirs_exist_ok=True, ignore=shutil.ignore_patterns("__init__.py", "__pycache__"))
    print(f"demo workspace written to {dest}")
    return EXIT_OK


def _candidate_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-radius", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--min-pts", type=int)
    p.add_argument("--m-override", type=int)
    p.add_argument("--sim-threshold", type=float)
    p.add_argument("--select-mode", choices=SELECT_MODES)


def _retrieval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--top-k", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--max-chunks", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", default=argparse.SUPPRESS, help="workspace directory (default: .)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--mock", action="store_true", default=argparse.SUPPRESS, help="use the deterministic mock models")
    common.add_argument("--strategy", choices=STRATEGIES, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mmkg", parents=[common], description="Multimodal knowledge graph toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index-text", parents=[common], help="chunk the document and extract the text graph")
    p.add_argument("--input")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--suggest-duplicates", action="store_true")
    p.add_argument("--apply-merges", action="store_true", help="apply a reviewed merged_entities.json")
    p.set_defaults(func=cmd_index_text)

    p = sub.add_parser("img2graph", parents=[common], help="build one graph per image")
    p.set_defaults(func=cmd_img2graph)

    p = sub.add_parser("fuse", parents=[common], help="link and fuse image graphs into the text graph")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--limit", type=int, help="fuse at most this many images in this run")
    _candidate_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("retrieve", parents=[common], help="print the retrieval bundle for a query")
    p.add_argument("--query", required=True)
    _retrieval_flags(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("query", parents=[common], help="answer a question")
    p.add_argument("--question", required=True)
    p.add_argument("--samples", type=int, help="answers per retrieved image")
    _retrieval_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="score linking on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--reduce", choices=("max", "mean"), default="max")
    p.add_argument("--output")
    _candidate_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-graphml", parents=[common], help="write a graph store as GraphML")
    p.add_argument("--store", choices=("mmkg", "chunk_kg"), default="mmkg")
    p.add_argument("--output")
    p.set_defaults(func=cmd_export_graphml)

    p = sub.add_parser("demo", parents=[common], help="copy the bundled demo workspace")
    p.add_argument("dest")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("workspace", "."), ("seed", None), ("mock", False), ("strategy", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    for name in ("window_radius", "eps", "min_pts", "m_override", "sim_threshold", "select_mode",
                 "top_k", "budget", "max_chunks", "limit", "samples"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        ws = Workspace(args.workspace)
        return args.func(ws, args)
    except MMKGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
