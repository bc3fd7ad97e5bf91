"""Command-line entry point: ``scenequery {gen,build,query,eval}``.

Exit codes: 0 success, 2 invalid configuration or input, 3 pipeline failure,
4 provider failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .agents.core import Agent, TranscriptLog
from .agents.http import HttpEndpoint, HttpProvider
from .agents.mock import MockProvider
from .capture import load_manifest
from .config import ConfigError, RunConfig
from .embeddings import HttpEmbeddingProvider, MockEmbeddingProvider
from .errors import AgentError, InvalidCapture, SceneQueryError, StageError
from .evaluation.metrics import (BACKGROUND, EvalReport, grounding_accuracy, planted_scene_graph, proposal_map,
                                 scene_graph_recall, segmentation_metrics, semantic_segment, top1_with_gt_boxes,
                                 transcripts_digest)
from .evaluation.planted import PlantedScene, generate_planted_scene
from .reasoning import Query, answer_query, answers_to_jsonl, read_query_batch
from .scenegraph import Providers, SceneGraph, build_graph

logger = logging.getLogger("scenequery")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_PROVIDER = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- helpers


def write_atomic(path: Optional[str], text: str) -> None:
    """Write via a temp file and rename; ``None`` or ``-`` writes to stdout."""
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix="." + target.name + ".")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write {path}: {exc}") from exc
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, target)


def _manifest_path(scene: Optional[str]) -> Path:
    if scene is None:
        raise CliError(EXIT_CONFIG, "--scene is required")
    p = Path(scene)
    return p / "manifest.json" if p.is_dir() else p


def _load_planted(scene: Optional[str], capture=None) -> PlantedScene:
    directory = _manifest_path(scene).parent
    if not (directory / "planted.json").is_file():
        raise CliError(EXIT_CONFIG, f"the oracle provider needs a planted scene; no planted.json in {directory}")
    return PlantedScene.load(directory, capture)


def _load_graph(path: Optional[str]) -> SceneGraph:
    if path is None:
        raise CliError(EXIT_CONFIG, "--graph is required")
    try:
        return SceneGraph.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read graph {path}: {exc}") from exc


def _agent_provider(cfg: RunConfig, scene: Optional[str], planted: Optional[PlantedScene] = None):
    if cfg.provider == "oracle":
        from .agents.oracle import OracleProvider

        return OracleProvider(planted or _load_planted(scene))
    if cfg.provider == "mock":
        if cfg.fixture is None:
            raise CliError(EXIT_CONFIG, "the mock provider needs --fixture (hash map JSON or transcript JSONL)")
        # a single JSON object is a hash map; anything else is read as a transcript log
        try:
            try:
                doc = json.loads(Path(cfg.fixture).read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                doc = None
            if isinstance(doc, dict) and not {"request", "raw_response"} <= set(doc):
                return MockProvider(doc)
            return MockProvider.from_transcripts(cfg.fixture)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot read fixture {cfg.fixture}: {exc}") from exc
    try:
        endpoint = HttpEndpoint.from_env(cfg.api_base, cfg.api_key, cfg.model, max_in_flight=max(cfg.jobs, 1))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    return HttpProvider(endpoint)


def _embeddings(cfg: RunConfig, provider=None):
    if cfg.provider == "http":
        endpoint = provider.endpoint if provider is not None else _agent_provider(cfg, None).endpoint
        return HttpEmbeddingProvider(endpoint, cfg.cache_dir, cfg.embed_dim)
    return MockEmbeddingProvider(cfg.embed_dim, cfg.seed)


def _config(args) -> RunConfig:
    overrides = {
        "provider": args.provider, "seed": args.seed, "jobs": args.jobs, "api_base": args.api_base,
        "api_key": args.api_key, "fixture": args.fixture, "verbosity": args.verbose or None,
    }
    try:
        return RunConfig.from_sources(args.config, overrides)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _dump_log(log: TranscriptLog, path: Optional[str]) -> None:
    if path:
        write_atomic(path, "".join(json.dumps(t.to_dict()) + "\n" for t in log))


# --------------------------------------------------------------------------- commands


def cmd_gen(args, cfg: RunConfig) -> int:
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out directory is required")
    try:
        scene = generate_planted_scene(cfg.seed, args.objects, args.frames, args.queries)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(dir=out, prefix=".gen-"))
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write to {out}: {exc}") from exc
    scene.save(staging)
    (staging / "run_config.json").write_text(json.dumps(cfg.echo(), indent=1) + "\n")
    for src in sorted(staging.rglob("*"), key=lambda p: len(p.parts)):
        dst = out / src.relative_to(staging)
        if src.is_dir():
            dst.mkdir(exist_ok=True)
        else:
            os.replace(src, dst)
    for d in sorted(staging.rglob("*"), key=lambda p: -len(p.parts)):
        d.rmdir()
    staging.rmdir()
    print(f"wrote planted scene (seed {cfg.seed}, {len(scene.objects)} objects, "
          f"{len(scene.queries)} queries) to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_build(args, cfg: RunConfig) -> int:
    manifest = _manifest_path(args.scene)
    try:
        capture = load_manifest(manifest)
    except InvalidCapture as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    planted = _load_planted(args.scene, capture) if cfg.provider == "oracle" else None
    provider = _agent_provider(cfg, args.scene, planted)
    log = TranscriptLog()
    providers = Providers.single(provider, _embeddings(cfg, provider), log)
    graph = build_graph(capture, providers, cfg.merge_config(), cfg.assoc_config(), cfg.jobs)
    graph.meta = {"config": cfg.echo(), "transcripts_digest": transcripts_digest(t.digest() for t in log)}
    write_atomic(args.out or "graph.json", graph.dumps() + "\n")
    _dump_log(log, args.transcripts)
    print(f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges", file=sys.stderr)
    return EXIT_OK


def _queries(args) -> list[dict]:
    if args.query is not None:
        return [{"query_id": "q000", "text": args.query}]
    if args.batch is None:
        raise CliError(EXIT_CONFIG, "give --query TEXT or --batch FILE")
    try:
        return read_query_batch(args.batch)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read batch {args.batch}: {exc}") from exc


def _answer_all(graph: SceneGraph, queries: list[dict], cfg: RunConfig, provider, log: TranscriptLog,
                explain: bool) -> list[dict]:
    agent = Agent(provider, log)
    embeddings = _embeddings(cfg, provider)

    def one(q: dict) -> dict:
        try:
            ans = answer_query(Query(q["text"], q["query_id"]), graph, agent, embeddings, cfg.node_cap)
        except (SceneQueryError, ValueError) as exc:
            return {"query_id": q["query_id"], "error": f"{type(exc).__name__}: {exc}"}
        return ans.to_dict(q["query_id"], explain)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(one, queries))
    else:
        rows = [one(q) for q in queries]
    echo = cfg.echo()
    return [{**r, "config": echo} for r in rows]


def cmd_query(args, cfg: RunConfig) -> int:
    graph = _load_graph(args.graph)
    queries = _queries(args)
    provider = _agent_provider(cfg, args.scene)
    log = TranscriptLog()
    rows = _answer_all(graph, queries, cfg, provider, log, args.explain)
    write_atomic(args.out, answers_to_jsonl(rows))
    _dump_log(log, args.transcripts)
    failed = sum("error" in r for r in rows)
    if failed:
        print(f"{failed}/{len(rows)} queries failed", file=sys.stderr)
    return EXIT_PIPELINE if failed == len(rows) else EXIT_OK


def _read_labels(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        return [str(v) for v in json.loads(text)]
    return [line.strip() for line in text.splitlines() if line.strip()]


def _eval_grounding(args, cfg: RunConfig) -> EvalReport:
    graph = _load_graph(args.graph)
    queries = _queries(args)
    log = TranscriptLog()
    if args.answers:
        rows = [json.loads(l) for l in Path(args.answers).read_text().splitlines() if l.strip()]
    else:
        rows = _answer_all(graph, queries, cfg, _agent_provider(cfg, args.scene), log, False)
    gts = [{"query_id": q["query_id"], "box": q["gt_box"], "gt_target_id": q.get("gt_target_id")} for q in queries
           if "gt_box" in q]
    if len(gts) != len(queries):
        raise CliError(EXIT_CONFIG, "every query in the batch needs gt_box for grounding evaluation")
    ok_rows = [r for r in rows if "error" not in r]
    failed = {r["query_id"] for r in rows if "error" in r}
    # A failed query scores as a miss: give it an empty box far from everything.
    preds = ok_rows + [{"query_id": q, "box": {"min": [-1e6] * 3, "max": [-1e6 + 1e-6] * 3}} for q in failed]
    acc = grounding_accuracy(preds, gts, (0.25, 0.5))
    metrics = {"Acc@0.25": acc[0.25], "Acc@0.5": acc[0.5]}
    pred_by_id = {r["query_id"]: r for r in rows}
    if args.scene and all(g["gt_target_id"] is not None for g in gts):
        proposals = proposal_map(graph, _load_planted(args.scene))
        answers = [{"query_id": r["query_id"], "target_id": r["target_id"]} for r in ok_rows]
        answers += [{"query_id": q, "target_id": None} for q in failed]
        proposals[None] = -1
        metrics["top1_gt_boxes"] = top1_with_gt_boxes(answers, gts, proposals)
    samples = [{"query_id": g["query_id"], "target_id": pred_by_id.get(g["query_id"], {}).get("target_id"),
                "error": pred_by_id.get(g["query_id"], {}).get("error")} for g in gts]
    return EvalReport("grounding", metrics, samples, cfg.echo(), transcripts_digest(t.digest() for t in log))


def _eval_seg(args, cfg: RunConfig) -> EvalReport:
    if args.pred and args.gt:
        pred, gt = _read_labels(args.pred), _read_labels(args.gt)
        classes = sorted(set(gt) - {BACKGROUND})
    else:
        graph = _load_graph(args.graph)
        planted = _load_planted(args.scene)
        classes = planted.categories
        gt = planted.point_labels().tolist()
        pred = semantic_segment(graph, classes, _embeddings(cfg), len(planted.capture.cloud)).tolist()
    metrics = segmentation_metrics(pred, gt, classes)
    on_objects = [p == g for p, g in zip(pred, gt) if g != BACKGROUND]
    metrics["object_point_accuracy"] = float(np.mean(on_objects)) if on_objects else 0.0
    samples = [{"class": c, "points": int(sum(g == c for g in gt))} for c in classes]
    return EvalReport("seg", metrics, samples, cfg.echo())


def _eval_sg(args, cfg: RunConfig) -> EvalReport:
    pred = _load_graph(args.graph)
    if args.gt:
        gt = _load_graph(args.gt)
    else:
        gt = planted_scene_graph(_load_planted(args.scene), _embeddings(cfg))
    metrics = scene_graph_recall(pred, gt, _embeddings(cfg))
    samples = [{"gt_node": n.id, "label": n.semantic_label} for n in gt.nodes]
    return EvalReport("sg", metrics, samples, cfg.echo())


def cmd_eval(args, cfg: RunConfig) -> int:
    task = {"grounding": _eval_grounding, "seg": _eval_seg, "sg": _eval_sg}[args.task]
    report = task(args, cfg)
    print(report.table())
    if args.out:
        write_atomic(args.out, report.to_json())
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value TOML file; flags override it")
    common.add_argument("--provider", choices=("mock", "oracle", "http"))
    common.add_argument("--api-base")
    common.add_argument("--api-key")
    common.add_argument("--fixture", help="mock replies: hash map JSON or transcript JSONL")
    common.add_argument("--jobs", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--transcripts", help="write the agent transcript log (JSONL) here")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="scenequery", description="3D scene graphs and two-stage querying.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a planted synthetic scene")
    gen.add_argument("--objects", type=int, default=4)
    gen.add_argument("--frames", type=int, default=4)
    gen.add_argument("--queries", type=int, default=20)

    build = sub.add_parser("build", parents=[common], help="build a scene graph from a manifest")
    build.add_argument("--scene", help="manifest.json or its directory")

    query = sub.add_parser("query", parents=[common], help="answer queries against a graph")
    query.add_argument("--graph")
    query.add_argument("--scene", help="planted scene directory (oracle provider)")
    query.add_argument("--query")
    query.add_argument("--batch")
    query.add_argument("--explain", action="store_true")

    ev = sub.add_parser("eval", parents=[common], help="compute metrics")
    ev.add_argument("task", choices=("grounding", "seg", "sg"))
    ev.add_argument("--graph")
    ev.add_argument("--scene")
    ev.add_argument("--batch")
    ev.add_argument("--query")
    ev.add_argument("--answers")
    ev.add_argument("--gt", help="ground truth: labels file (seg) or graph JSON (sg)")
    ev.add_argument("--pred", help="predicted labels file (seg)")
    return parser


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "query": cmd_query, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER if isinstance(exc.cause, AgentError) else EXIT_PIPELINE
    except AgentError as exc:
        print(f"error: provider: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except SceneQueryError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
