"""Two-stage query reasoning over a scene graph.

Stage 1 reads the scene caption and the object list and proposes candidate
node ids plus the relations the query depends on. Stage 2 sees only those
candidates with their incident relations, boxes and distance to the candidate
centroid, and picks the target.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .agents.core import Agent, AgentRequest, AgentTranscript, Message, parse_json_response
from .agents.tasks import SYSTEM_PROMPT
from .embeddings import EmbeddingProvider, cosine_matrix
from .errors import EmptyGraph, NotACandidate, ParseFailure
from .scenegraph import Node, SceneGraph

logger = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 200
REASONING_RETRIES = 1

STAGE1_PROMPT = (
    "Scene summary: {scene}\n"
    "Objects (id, caption, box min/max in meters, z up):\n{objects}\n\n"
    "Query: \"{query}\"\n"
    "Analyze the query against the scene. List the ids of every object that could be the target or that the "
    "query refers to, and the spatial relations the query depends on. Reply with JSON: "
    '{{"candidates": [ids], "relations": [{{"subject": id, "relation": text, "object": id or null}}], '
    '"rationale": text}}'
)
STAGE2_PROMPT = (
    "Query: \"{query}\"\n"
    "Candidate objects, each with its caption, box, relations to other objects, and distance from its box "
    "center to the centroid of all candidates:\n{candidates}\n\n"
    "Relations identified earlier: {relations}\n"
    "Reason about the relations and pick the single object the query refers to. Reply with JSON: "
    '{{"target": id, "rationale": text}}'
)


@dataclass(frozen=True)
class Query:
    text: str
    query_id: str = ""

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")


@dataclass
class Stage1Result:
    candidate_ids: list[int]
    relation_queries: list[dict] = field(default_factory=list)
    rationale: str = ""
    transcript: Optional[AgentTranscript] = None


@dataclass
class Answer:
    target_id: int
    target: dict
    rationale: str
    transcripts: list[AgentTranscript] = field(default_factory=list)
    degraded: bool = False

    def to_dict(self, query_id: str = "", explain: bool = False) -> dict:
        doc = {"query_id": query_id, "target_id": self.target_id, "box": self.target["box"],
               "rationale": self.rationale}
        if explain:
            doc["label"] = self.target["label"]
            doc["caption"] = self.target["caption"]
            doc["degraded"] = self.degraded
            doc["transcripts"] = [t.digest() for t in self.transcripts]
        return doc


def _snapshot(node: Node) -> dict:
    return {"label": node.semantic_label, "caption": node.caption, "box": node.box.to_dict()}


def _fmt(values: Iterable[float]) -> str:
    return "[" + ", ".join(f"{float(v):.2f}" for v in values) + "]"


def _center(node: Node) -> list[float]:
    return [float(v) for v in node.box.center]


def prompt_nodes(query: Query, graph: SceneGraph, embeddings: Optional[EmbeddingProvider] = None,
                 node_cap: int = DEFAULT_NODE_CAP) -> list[Node]:
    """Nodes serialized into the stage-1 prompt, truncated to ``node_cap`` by query similarity."""
    nodes = list(graph.nodes)
    if len(nodes) <= node_cap:
        return nodes
    if embeddings is None:
        raise ValueError(f"graph has {len(nodes)} nodes (cap {node_cap}); ranking needs an embeddings provider")
    q = embeddings.embed_text(query.text)
    sims = cosine_matrix([n.feature for n in nodes], [q])[:, 0]
    order = sorted(range(len(nodes)), key=lambda i: (-sims[i], nodes[i].id))[:node_cap]
    logger.warning("object list truncated from %d to %d nodes for query %r", len(nodes), node_cap, query.text)
    return [nodes[i] for i in sorted(order)]


def stage1_analyze(query: Query, graph: SceneGraph, agent: Agent, embeddings: Optional[EmbeddingProvider] = None,
                   node_cap: int = DEFAULT_NODE_CAP) -> Stage1Result:
    if not graph.nodes:
        raise EmptyGraph("cannot reason over an empty graph")
    if len(graph.nodes) == 1:
        return Stage1Result([graph.nodes[0].id], [], "single-node graph")
    nodes = prompt_nodes(query, graph, embeddings, node_cap)
    known = {n.id for n in nodes}
    listing = "\n".join(f"- id {n.id}: {n.caption}; box {_fmt(n.box.min)} to {_fmt(n.box.max)}" for n in nodes)
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT),
         Message("user", STAGE1_PROMPT.format(scene=graph.scene_caption, objects=listing, query=query.text))),
        response_format="stage1", max_retries=REASONING_RETRIES, task="stage1",
        context={"query": query.text, "nodes": [{"id": n.id, "center": _center(n)} for n in nodes]},
    )

    def parse(raw: str) -> dict:
        doc = parse_json_response(raw, "stage1")
        cands = sorted({c for c in doc["candidates"] if c in known})
        if not cands:
            raise ParseFailure("no candidate id refers to a graph node")
        rels = [r for r in doc["relations"]
                if r["subject"] in known and (r["object"] is None or r["object"] in known)]
        return {"candidates": cands, "relations": rels, "rationale": doc.get("rationale", "")}

    tr = agent.run(req, parse)
    return Stage1Result(tr.parsed["candidates"], tr.parsed["relations"], tr.parsed["rationale"], tr)


def candidate_context(graph: SceneGraph, candidate_ids: Sequence[int]) -> list[dict]:
    """Per-candidate facts for stage 2, including distance to the candidate centroid."""
    nodes = [graph.node(i) for i in candidate_ids]
    centers = np.array([n.box.center for n in nodes], dtype=np.float64)
    centroid = centers.mean(axis=0)
    out = []
    for n, c in zip(nodes, centers):
        rels = []
        for e in graph.incident(n.id):
            other = e.b if e.a == n.id else e.a
            phrase = f"{e.relation} node {other}" if e.a == n.id else f"node {other} is {e.relation} it"
            rels.append(f"{phrase} ({e.distance:.2f} m)")
        out.append({"id": n.id, "caption": n.caption, "center": [float(v) for v in c],
                    "box": n.box.to_dict(), "relations": rels,
                    "centroid_distance": float(np.linalg.norm(c - centroid))})
    return out


def stage2_reason(query: Query, graph: SceneGraph, s1: Stage1Result, agent: Agent) -> Answer:
    if not s1.candidate_ids:
        raise ValueError("stage 2 needs at least one candidate")
    cands = list(dict.fromkeys(s1.candidate_ids))
    transcripts = [s1.transcript] if s1.transcript is not None else []
    if len(cands) == 1:
        node = graph.node(cands[0])
        return Answer(node.id, _snapshot(node), "single candidate", transcripts)
    ctx = candidate_context(graph, cands)
    listing = "\n".join(
        f"- id {c['id']}: {c['caption']}; box {_fmt(c['box']['min'])} to {_fmt(c['box']['max'])}; "
        f"relations: {'; '.join(c['relations']) or 'none'}; distance to centroid {c['centroid_distance']:.2f} m"
        for c in ctx)
    relations = json.dumps(s1.relation_queries) if s1.relation_queries else "none"
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT),
         Message("user", STAGE2_PROMPT.format(query=query.text, candidates=listing, relations=relations))),
        response_format="stage2", max_retries=REASONING_RETRIES, task="stage2",
        context={"query": query.text, "candidates": [{"id": c["id"], "center": c["center"]} for c in ctx]},
    )
    tr = agent.run(req)
    transcripts.append(tr)
    target = int(tr.parsed["target"])
    if target not in cands:
        err = NotACandidate(f"stage 2 chose node {target}, not among candidates {cands}")
        err.transcript = tr
        raise err
    node = graph.node(target)
    return Answer(target, _snapshot(node), tr.parsed["rationale"], transcripts)


def answer_query(query: Union[Query, str], graph: SceneGraph, agent: Agent,
                 embeddings: Optional[EmbeddingProvider] = None, node_cap: int = DEFAULT_NODE_CAP) -> Answer:
    """Stage 1 then stage 2; a stage-1 parse failure degrades to all nodes as candidates."""
    if isinstance(query, str):
        query = Query(query)
    if not graph.nodes:
        raise EmptyGraph("cannot reason over an empty graph")
    degraded = False
    try:
        s1 = stage1_analyze(query, graph, agent, embeddings, node_cap)
    except ParseFailure as exc:
        logger.warning("stage 1 failed for %r (%s); using all nodes as candidates", query.text, exc)
        s1 = Stage1Result([n.id for n in prompt_nodes(query, graph, embeddings, node_cap)], [],
                          "stage 1 failed", getattr(exc, "transcript", None))
        degraded = True
    answer = stage2_reason(query, graph, s1, agent)
    assert answer.target_id in s1.candidate_ids
    if degraded:
        answer.degraded = True
        answer.rationale = f"[degraded: stage 1 unparseable, all nodes considered] {answer.rationale}"
    return answer


# --------------------------------------------------------------------------- batch files


def read_query_batch(path: Union[str, Path]) -> list[dict]:
    """Query batch: JSON lines with ``query_id``, ``text`` and optional ``gt_target_id``/``gt_box``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        doc = json.loads(line)
        if "text" not in doc:
            raise ValueError(f"{path}:{lineno}: query line has no 'text'")
        doc.setdefault("query_id", f"q{lineno:03d}")
        out.append(doc)
    return out


def answers_to_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r) + "\n" for r in rows)
