"""Grounding, segmentation and scene-graph recall metrics, plus the report container."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..embeddings import EmbeddingProvider, Feature, cosine_matrix
from ..errors import EmptyGraph, IdMismatch, LengthMismatch
from ..geometry import Box3D, box_iou
from ..scenegraph import Edge, Node, SceneGraph
from .planted import PlantedScene

BACKGROUND = "background"
CLASS_PROMPT = "an image of {}"
OBJECT_KS = (5, 10)
PREDICATE_KS = (3, 5)
RELATIONSHIP_KS = (50, 100)
TRIPLET_FACTOR_TOP = 5

BoxLike = Union[Box3D, Mapping]


def _box(b: BoxLike) -> Box3D:
    return b if isinstance(b, Box3D) else Box3D.from_dict(b)


def _by_id(rows: Iterable[Mapping], what: str) -> dict[str, Mapping]:
    out = {}
    for r in rows:
        qid = str(r["query_id"])
        if qid in out:
            raise IdMismatch(f"duplicate query_id {qid!r} in {what}")
        out[qid] = r
    return out


def _same_ids(a: Mapping, b: Mapping) -> list[str]:
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))[:5]
        raise IdMismatch(f"query ids differ between predictions and ground truth, e.g. {missing}")
    return sorted(a)


# --------------------------------------------------------------------------- grounding


def grounding_ious(predictions: Iterable[Mapping], gts: Iterable[Mapping]) -> dict[str, float]:
    pred, gt = _by_id(predictions, "predictions"), _by_id(gts, "ground truth")
    return {q: box_iou(_box(pred[q]["box"]), _box(gt[q]["box"])) for q in _same_ids(pred, gt)}


def grounding_accuracy(predictions: Iterable[Mapping], gts: Iterable[Mapping],
                       thresholds: Sequence[float] = (0.25, 0.5)) -> dict[float, float]:
    """Fraction of queries whose predicted box reaches IoU ``t`` with the ground-truth box."""
    ious = np.array(list(grounding_ious(predictions, gts).values()))
    if len(ious) == 0:
        return {float(t): 0.0 for t in thresholds}
    return {float(t): float(np.mean(ious >= t)) for t in thresholds}


def top1_with_gt_boxes(answers: Iterable[Mapping], gts: Iterable[Mapping], proposals: Mapping[int, Any]) -> float:
    """Accuracy of picking the ground-truth proposal; ``proposals`` maps node id -> proposal id.

    Ground-truth rows carry the correct proposal under ``gt_target_id``.
    """
    ans, gt = _by_id(answers, "answers"), _by_id(gts, "ground truth")
    ids = _same_ids(ans, gt)
    if not ids:
        return 0.0
    hits = 0
    for q in ids:
        node = ans[q]["target_id"]
        if node not in proposals:
            raise IdMismatch(f"answer for {q!r} names node {node}, which maps to no proposal")
        hits += proposals[node] == gt[q]["gt_target_id"]
    return hits / len(ids)


# --------------------------------------------------------------------------- correspondence


def match_point_sets(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> dict[int, int]:
    """Hungarian assignment maximizing point overlap; returns pred index -> gt index (overlap > 0 only)."""
    if not pred or not gt:
        return {}
    gt_of = {}
    for j, idx in enumerate(gt):
        for p in np.asarray(idx).tolist():
            gt_of[p] = j
    overlap = np.zeros((len(pred), len(gt)), dtype=np.int64)
    for i, idx in enumerate(pred):
        js = [gt_of[p] for p in np.asarray(idx).tolist() if p in gt_of]
        if js:
            overlap[i] += np.bincount(js, minlength=len(gt))
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols) if overlap[r, c] > 0}


def proposal_map(graph: SceneGraph, scene: PlantedScene) -> dict[int, int]:
    """Node id -> planted object index by point-overlap matching."""
    m = match_point_sets([n.point_indices for n in graph.nodes], [o.point_indices for o in scene.objects])
    return {graph.nodes[i].id: j for i, j in m.items()}


# --------------------------------------------------------------------------- segmentation


def segmentation_metrics(pred: Sequence[str], gt: Sequence[str], classes: Sequence[str]) -> dict[str, float]:
    """mAcc, mIoU and frequency-weighted mIoU over ``classes`` present in ``gt``."""
    pred, gt = np.asarray(pred, dtype=object), np.asarray(gt, dtype=object)
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted labels vs {len(gt)} ground-truth labels")
    accs, ious, freqs = [], [], []
    for c in dict.fromkeys(classes):
        in_gt = gt == c
        n_gt = int(in_gt.sum())
        if n_gt == 0:
            continue
        in_pred = pred == c
        tp = int(np.sum(in_gt & in_pred))
        accs.append(tp / n_gt)
        ious.append(tp / int(np.sum(in_gt | in_pred)))
        freqs.append(n_gt)
    if not accs:
        return {"mAcc": 0.0, "mIoU": 0.0, "fmIoU": 0.0}
    # weight by raw counts and divide once, which keeps e.g. 0.8 * 0.8 + 0.2 * 0 at exactly 0.64
    fm = float(np.dot(np.asarray(freqs, dtype=np.float64), ious)) / sum(freqs)
    return {"mAcc": float(np.mean(accs)), "mIoU": float(np.mean(ious)), "fmIoU": fm}


def semantic_segment(graph: SceneGraph, classes: Sequence[str], embeddings: EmbeddingProvider,
                     n_points: int) -> np.ndarray:
    """Per-point class labels: each node's points take the class prompt closest to its feature."""
    labels = np.full(n_points, BACKGROUND, dtype=object)
    if not classes or not graph.nodes:
        return labels
    prompts = [embeddings.embed_text(CLASS_PROMPT.format(c)) for c in classes]
    sims = cosine_matrix([n.feature for n in graph.nodes], prompts)
    for node, row in zip(graph.nodes, sims):
        labels[node.point_indices] = classes[int(np.argmax(row))]
    return labels


# --------------------------------------------------------------------------- scene-graph recall


def _confidence(cos: np.ndarray) -> np.ndarray:
    return (1.0 + np.asarray(cos)) / 2.0


def _ranking(scores: np.ndarray, vocab: Sequence[str]) -> list[str]:
    order = sorted(range(len(vocab)), key=lambda i: (-scores[i], vocab[i]))
    return [vocab[i] for i in order]


def scene_graph_recall(pred: SceneGraph, gt: SceneGraph, embeddings: EmbeddingProvider,
                       object_ks: Sequence[int] = OBJECT_KS, predicate_ks: Sequence[int] = PREDICATE_KS,
                       relationship_ks: Sequence[int] = RELATIONSHIP_KS,
                       object_vocab: Optional[Sequence[str]] = None,
                       predicate_vocab: Optional[Sequence[str]] = None) -> dict[str, float]:
    """Object, predicate and relationship recall at k.

    Nodes correspond by Hungarian matching on point overlap. Node labels are
    ranked by cosine of the node feature with label embeddings; an edge's
    predicates by cosine of its relation text with predicate embeddings.
    Triplets are scored by the product of subject, predicate and object
    confidences, each mapped from cosine to [0, 1].
    """
    if not pred.nodes or not gt.nodes:
        raise EmptyGraph("recall needs non-empty predicted and ground-truth graphs")
    o_vocab = sorted(set(object_vocab or [n.semantic_label for n in gt.nodes]))
    p_vocab = sorted(set(predicate_vocab or [e.relation for e in gt.edges] or ["none"]))
    o_emb = [embeddings.embed_text(v) for v in o_vocab]
    p_emb = [embeddings.embed_text(v) for v in p_vocab]

    node_scores = _confidence(cosine_matrix([n.feature for n in pred.nodes], o_emb))
    pred_index = {n.id: i for i, n in enumerate(pred.nodes)}
    match = match_point_sets([n.point_indices for n in pred.nodes], [n.point_indices for n in gt.nodes])
    gt_to_pred = {gt.nodes[j].id: pred.nodes[i].id for i, j in match.items()}

    out: dict[str, float] = {}
    obj_rank: dict[int, Optional[int]] = {}
    for g in gt.nodes:
        p = gt_to_pred.get(g.id)
        if p is None or g.semantic_label not in o_vocab:
            obj_rank[g.id] = None
        else:
            obj_rank[g.id] = _ranking(node_scores[pred_index[p]], o_vocab).index(g.semantic_label)
    for k in object_ks:
        out[f"object_R@{k}"] = float(np.mean([r is not None and r < k for r in obj_rank.values()]))

    pred_edges = {(e.a, e.b): e for e in pred.edges}
    edge_scores = {}
    if pred.edges:
        sims = _confidence(cosine_matrix([embeddings.embed_text(e.relation) for e in pred.edges], p_emb))
        edge_scores = {(e.a, e.b): s for e, s in zip(pred.edges, sims)}
    pred_rank = []
    for e in gt.edges:
        key = (gt_to_pred.get(e.a), gt_to_pred.get(e.b))
        if key in pred_edges and e.relation in p_vocab:
            pred_rank.append(_ranking(edge_scores[key], p_vocab).index(e.relation))
        else:
            pred_rank.append(None)
    for k in predicate_ks:
        out[f"predicate_R@{k}"] = float(np.mean([r is not None and r < k for r in pred_rank])) if gt.edges else 1.0

    triplets = []
    for (a, b), pscore in edge_scores.items():
        sa, sb = node_scores[pred_index[a]], node_scores[pred_index[b]]
        top_a = np.argsort(-sa, kind="stable")[:TRIPLET_FACTOR_TOP]
        top_b = np.argsort(-sb, kind="stable")[:TRIPLET_FACTOR_TOP]
        top_p = np.argsort(-pscore, kind="stable")[:TRIPLET_FACTOR_TOP]
        for i in top_a:
            for r in top_p:
                for j in top_b:
                    triplets.append((float(sa[i] * pscore[r] * sb[j]), a, o_vocab[i], p_vocab[r], b, o_vocab[j]))
    triplets.sort(key=lambda t: (-t[0], t[1], t[4], t[2], t[3], t[5]))
    gt_labels = {n.id: n.semantic_label for n in gt.nodes}
    wanted = [(gt_to_pred.get(e.a), gt_labels[e.a], e.relation, gt_to_pred.get(e.b), gt_labels[e.b])
              for e in gt.edges]
    for k in relationship_ks:
        top = {t[1:] for t in triplets[:k]}
        out[f"relationship_R@{k}"] = float(np.mean([w in top for w in wanted])) if wanted else 1.0
    return out


def planted_scene_graph(scene: PlantedScene, embeddings: EmbeddingProvider) -> SceneGraph:
    """Ground-truth graph of a planted scene: one node per object, one edge per planted relation.

    Only the first relation per unordered pair is kept, since a graph holds one
    edge per pair.
    """
    nodes = [Node(o.index, o.point_indices, embeddings.embed_text(o.category), o.caption, o.box, o.category)
             for o in scene.objects]
    edges, seen = [], set()
    for a, b, rel in scene.relations:
        if frozenset((a, b)) in seen:
            continue
        seen.add(frozenset((a, b)))
        edges.append(Edge(a, b, rel, float(np.linalg.norm(np.subtract(scene.objects[a].box.center,
                                                                     scene.objects[b].box.center)))))
    return SceneGraph(nodes, edges, "; ".join(o.caption for o in scene.objects))


# --------------------------------------------------------------------------- report


def transcripts_digest(digests: Iterable[str]) -> str:
    """Order-independent hash of transcript digests, so concurrent runs agree."""
    h = hashlib.sha256()
    for d in sorted(digests):
        h.update(d.encode("ascii"))
        h.update(b"\n")
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    samples: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    transcripts_digest: str = ""

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name} = {value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": self.metrics, "samples": self.samples, "config": self.config,
                "transcripts_digest": self.transcripts_digest}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        width = max([len(k) for k in self.metrics] + [6])
        lines = [f"{self.task} ({len(self.samples)} samples)", f"{'metric':<{width}}  value", "-" * (width + 8)]
        lines += [f"{k:<{width}}  {v:.4f}" for k, v in self.metrics.items()]
        return "\n".join(lines)
