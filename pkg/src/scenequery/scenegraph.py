"""Scene graph data model, serialization, and the graph-construction pipeline.

Pipeline order: detect -> associate -> superpoints -> similarity -> spectral
merge -> attach semantics -> captions -> edges -> scene caption.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, TypeVar

import numpy as np
from scipy.spatial import cKDTree

from .agents.core import Agent, TranscriptLog
from .agents.tasks import Crop, NodeSummary, caption_node, list_objects, relation_label, summarize_scene
from .capture import SceneCapture
from .embeddings import EmbeddingProvider, Feature, cosine, fuse_features
from .errors import AgentError, EmptyScene, MissingDepth, SceneQueryError, StageError
from .geometry import (Box3D, CameraFrame, Mask2D, backproject_mask, bounding_box, box_iou, center_distance,
                       project_to_pixels, voxel_downsample)
from .superpoints import (UNKNOWN_LABEL, MergeConfig, SuperpointCluster, assign_labels, build_similarity,
                          embed_labels, merge_superpoints, segment_superpoints)

logger = logging.getLogger(__name__)

OVERLAP_EDGE_IOU = 0.05
DISTANCE_TIE_BREAK = 0.001
T = TypeVar("T")


@dataclass(frozen=True)
class AssocConfig:
    voxel_size: float = 0.025
    nn_threshold: float = 0.025
    assoc_threshold: float = 1.1

    def __post_init__(self):
        if min(self.voxel_size, self.nn_threshold, self.assoc_threshold) <= 0:
            raise ValueError("association parameters must be positive")


# --------------------------------------------------------------------------- data model


def quantize(x: float) -> float:
    """Round to 9 significant digits."""
    return float(f"{float(x):.9g}")


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    point_indices: np.ndarray
    feature: Feature
    caption: str
    box: Box3D
    semantic_label: str

    def __post_init__(self):
        idx = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        if len(idx) == 0:
            raise ValueError(f"node {self.id} has no points")
        object.__setattr__(self, "point_indices", idx)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.semantic_label,
            "caption": self.caption,
            "box": self.box.to_dict(),
            "feature": [float(v) for v in self.feature.values],
            "point_indices": self.point_indices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Node":
        return cls(int(d["id"]), np.asarray(d["point_indices"], dtype=np.int64), Feature(d["feature"]),
                   d["caption"], Box3D.from_dict(d["box"]), d["label"])

    def summary(self) -> NodeSummary:
        return NodeSummary(self.id, self.caption, tuple(float(v) for v in self.box.center))


@dataclass(frozen=True)
class Edge:
    a: int
    b: int
    relation: str
    distance: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("edge endpoints must differ")
        if not self.relation:
            raise ValueError("edge relation must be non-empty")

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "relation": self.relation, "distance": self.distance}


@dataclass(eq=False)
class SceneGraph:
    nodes: list[Node]
    edges: list[Edge]
    scene_caption: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        seen = set()
        for e in self.edges:
            if e.a not in known or e.b not in known:
                raise ValueError(f"edge {e.a}-{e.b} references a missing node")
            key = frozenset((e.a, e.b))
            if key in seen:
                raise ValueError(f"duplicate edge {e.a}-{e.b}")
            seen.add(key)

    def node(self, node_id: int) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def incident(self, node_id: int) -> list[Edge]:
        return [e for e in self.edges if node_id in (e.a, e.b)]

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "scene_caption": self.scene_caption,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [e.to_dict() for e in self.edges],
        }
        if self.meta:
            doc["meta"] = self.meta
        return doc

    def __eq__(self, other) -> bool:
        return isinstance(other, SceneGraph) and self.to_dict() == other.to_dict()

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "SceneGraph":
        doc = json.loads(text)
        return cls([Node.from_dict(n) for n in doc["nodes"]],
                   [Edge(int(e["a"]), int(e["b"]), e["relation"], float(e["distance"])) for e in doc["edges"]],
                   doc.get("scene_caption", ""), doc.get("meta", {}))


# --------------------------------------------------------------------------- providers


@dataclass
class Providers:
    llm: Agent
    lvlm: Agent
    embeddings: EmbeddingProvider

    @classmethod
    def single(cls, provider, embeddings: EmbeddingProvider, log: Optional[TranscriptLog] = None) -> "Providers":
        agent = Agent(provider, log)
        return cls(agent, agent, embeddings)


def _pmap(fn: Callable[..., T], items: Sequence, jobs: int) -> list[T]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- detection


def singularize(word: str) -> str:
    w = word.strip().lower()
    if len(w) > 4 and w.endswith("ies"):
        return w[:-3] + "y"
    if len(w) > 4 and w.endswith(("ses", "xes", "ches", "shes", "zes")):
        return w[:-2]
    if len(w) > 3 and w.endswith("s") and not w.endswith(("ss", "us", "is")):
        return w[:-1]
    return w


@dataclass(frozen=True, eq=False)
class GroundedMask:
    frame_id: int
    mask_index: int
    mask: Mask2D


def detect_objects(capture: SceneCapture, lvlm: Agent, jobs: int = 1) -> tuple[list[str], dict[int, list[GroundedMask]]]:
    """Keep the 2D masks whose category the LVLM also lists; drop hallucinated categories."""
    frames = sorted(capture.frames, key=lambda f: f.frame_id)
    listed = _pmap(lambda f: list_objects(f, lvlm), frames, jobs)
    categories: set[str] = set()
    grounded: dict[int, list[GroundedMask]] = {}
    for frame, names in zip(frames, listed):
        wanted = {singularize(n) for n in names}
        keep = []
        for i, m in enumerate(capture.masks.get(frame.frame_id, [])):
            cat = singularize(m.label)
            if cat in wanted:
                keep.append(GroundedMask(frame.frame_id, i, m))
                categories.add(cat)
        grounded[frame.frame_id] = keep
    return sorted(categories), grounded


# --------------------------------------------------------------------------- association


@dataclass(eq=False)
class Detection:
    frame_id: int
    mask_index: int
    mask: Mask2D
    points: np.ndarray
    cloud_indices: np.ndarray
    feature: Feature


@dataclass(eq=False)
class NodeDraft:
    id: int
    detections: list[Detection]
    points: np.ndarray
    feature_sum: np.ndarray
    point_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _tree: Optional[cKDTree] = field(default=None, repr=False)

    @property
    def feature(self) -> Feature:
        return Feature.unit(self.feature_sum)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def overlap(self, points: np.ndarray, radius: float) -> float:
        dist, _ = self.tree.query(points, k=1, distance_upper_bound=radius)
        return float(np.mean(np.isfinite(dist)))

    def absorb(self, det: Detection, voxel_size: float) -> None:
        self.detections.append(det)
        self.points = voxel_downsample(np.concatenate([self.points, det.points]), voxel_size)
        self.feature_sum = self.feature_sum + det.feature.values
        self._tree = None


def _on_surface(points: np.ndarray, rows: np.ndarray, cols: np.ndarray, keep: np.ndarray, frame: CameraFrame,
                z_tolerance: float) -> np.ndarray:
    """Reject points lying in front of the depth surface at their pixel.

    The occlusion test alone admits them; they arise where a silhouette edge
    rounds a foreground point onto a background pixel and its mask.
    """
    ok = np.ones(len(points), dtype=bool)
    idx = np.flatnonzero(keep)
    z = frame.world_to_camera(points[idx])[:, 2]
    stored = frame.depth[rows[idx], cols[idx]].astype(np.float64)
    known = np.isfinite(stored) & (stored > 0)
    ok[idx[known & (z < stored - z_tolerance)]] = False
    return ok


def _detections(grounded: Mapping[int, Sequence[GroundedMask]], capture: SceneCapture, config: AssocConfig,
                embeddings: EmbeddingProvider, z_tolerance: float) -> list[Detection]:
    out = []
    for fid in sorted(grounded):
        if not grounded[fid]:
            continue
        frame = capture.frame(fid)
        if frame.depth is None:
            raise MissingDepth(f"frame {fid} has no depth for back-projection")
        rows, cols, keep = project_to_pixels(capture.cloud.points, frame, z_tolerance)
        keep &= _on_surface(capture.cloud.points, rows, cols, keep, frame, z_tolerance)
        pix = np.where(keep, rows * frame.width + cols, -1)
        visible = np.flatnonzero(pix >= 0)
        for g in grounded[fid]:
            pts = voxel_downsample(backproject_mask(g.mask, frame), config.voxel_size)
            if len(pts) == 0:
                continue
            inside = g.mask.bitmap.reshape(-1)[pix[visible]]
            out.append(Detection(fid, g.mask_index, g.mask, pts, visible[inside],
                                 embeddings.embed_image_crop(frame, g.mask)))
    return out


def associate_objects(grounded: Mapping[int, Sequence[GroundedMask]], capture: SceneCapture,
                      config: AssocConfig, embeddings: EmbeddingProvider,
                      z_tolerance: float = 0.05) -> list[NodeDraft]:
    """Greedy multi-view association in (frame_id, mask index) order.

    Score against a draft = fraction of detection points within
    ``nn_threshold`` of the draft's points + cosine of visual features. Cloud
    points claimed by several drafts go to the draft that saw them most often.
    """
    drafts: list[NodeDraft] = []
    for det in _detections(grounded, capture, config, embeddings, z_tolerance):
        best, best_score = None, -np.inf
        for d in drafts:
            score = d.overlap(det.points, config.nn_threshold) + cosine(det.feature, d.feature)
            if score > best_score:
                best, best_score = d, score
        if best is not None and best_score >= config.assoc_threshold:
            best.absorb(det, config.voxel_size)
        else:
            drafts.append(NodeDraft(len(drafts), [det], det.points, det.feature.values.copy()))
    return _resolve_points(drafts, len(capture.cloud))


def _resolve_points(drafts: list[NodeDraft], n_points: int) -> list[NodeDraft]:
    if not drafts:
        return []
    votes = np.zeros((len(drafts), n_points), dtype=np.int32)
    for d in drafts:
        for det in d.detections:
            votes[d.id, det.cloud_indices] += 1
    owner = np.argmax(votes, axis=0)
    claimed = votes.max(axis=0) > 0
    kept = []
    for d in drafts:
        d.point_indices = np.flatnonzero(claimed & (owner == d.id))
        if len(d.point_indices):
            kept.append(d)
    for new_id, d in enumerate(kept):
        d.id = new_id
    return kept


# --------------------------------------------------------------------------- semantics


@dataclass(frozen=True, eq=False)
class SemanticDraft:
    draft: NodeDraft
    label: str
    feature: Feature


def attach_semantics(drafts: Sequence[NodeDraft], clusters: Sequence[SuperpointCluster], n_points: int,
                     embeddings: EmbeddingProvider) -> list[SemanticDraft]:
    """Label each draft by its max-overlap cluster and fuse visual with label features."""
    cluster_of = np.full(n_points, -1)
    for c in clusters:
        cluster_of[c.point_indices] = c.id
    out = []
    for d in drafts:
        ids = cluster_of[d.point_indices]
        ids = ids[ids >= 0]
        visual = d.feature
        if len(ids) == 0:
            out.append(SemanticDraft(d, UNKNOWN_LABEL, visual))
            continue
        counts = np.bincount(ids, minlength=len(clusters))
        label = clusters[int(np.argmax(counts))].label
        out.append(SemanticDraft(d, label, fuse_features(visual, embeddings.embed_text(label))))
    return out


# --------------------------------------------------------------------------- edges


def minimum_spanning_tree(weights: np.ndarray) -> list[tuple[int, int]]:
    """Prim's algorithm on a dense symmetric weight matrix; ties resolve to lower indices."""
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if n < 2:
        return []
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = w[0].copy()
    parent = np.zeros(n, dtype=int)
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        edges.append((min(parent[j], j), max(parent[j], j)))
        in_tree[j] = True
        closer = ~in_tree & (w[j] < best)
        best[closer] = w[j][closer]
        parent[closer] = j
    return sorted(edges)


def edge_weights(nodes: Sequence[Node]) -> tuple[np.ndarray, np.ndarray]:
    n = len(nodes)
    iou = np.zeros((n, n))
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            iou[i, j] = iou[j, i] = box_iou(nodes[i].box, nodes[j].box)
            w[i, j] = w[j, i] = 1.0 - iou[i, j] + DISTANCE_TIE_BREAK * center_distance(nodes[i].box, nodes[j].box)
    return w, iou


def select_edge_pairs(nodes: Sequence[Node]) -> list[tuple[int, int]]:
    """Index pairs kept as edges: the MST plus every pair with box IoU above 0.05."""
    w, iou = edge_weights(nodes)
    pairs = set(minimum_spanning_tree(w))
    n = len(nodes)
    pairs |= {(i, j) for i in range(n) for j in range(i + 1, n) if iou[i, j] > OVERLAP_EDGE_IOU}
    return sorted(pairs)


def build_edges(nodes: Sequence[Node], llm: Agent, jobs: int = 1) -> list[Edge]:
    if len(nodes) < 2:
        raise ValueError("edges need at least two nodes")
    pairs = select_edge_pairs(nodes)

    def make(pair: tuple[int, int]) -> Edge:
        a, b = nodes[pair[0]], nodes[pair[1]]
        rel = relation_label(a.summary(), b.summary(), llm)
        return Edge(a.id, b.id, rel, center_distance(a.box, b.box))

    return _pmap(make, pairs, jobs)


def scene_caption(nodes: Sequence[Node], llm: Agent) -> str:
    if not nodes:
        raise ValueError("scene caption needs at least one node")
    return summarize_scene([n.caption for n in nodes], llm)


# --------------------------------------------------------------------------- pipeline


def _stage(name: str, fn: Callable[[], T]) -> T:
    try:
        return fn()
    except StageError:
        raise
    except (SceneQueryError, ValueError) as exc:
        raise StageError(name, exc) from exc


def _crops(draft: NodeDraft, capture: SceneCapture) -> list[Crop]:
    dets = sorted(draft.detections, key=lambda d: (-d.mask.area, d.frame_id, d.mask_index))
    return [Crop(capture.frame(d.frame_id), d.mask, d.mask_index) for d in dets[:10]]


def _quantized_box(box: Box3D) -> Box3D:
    return Box3D(tuple(quantize(v) for v in box.min), tuple(quantize(v) for v in box.max))


def _quantized_feature(feature: Feature) -> Feature:
    return Feature([quantize(v) for v in feature.values])


def build_graph(capture: SceneCapture, providers: Providers, merge: MergeConfig = MergeConfig(),
                assoc: AssocConfig = AssocConfig(), jobs: int = 1) -> SceneGraph:
    if not capture.frames:
        raise EmptyScene("capture has no frames")
    cloud = capture.cloud
    categories, grounded = _stage("detect", lambda: detect_objects(capture, providers.lvlm, jobs))
    drafts = _stage("associate", lambda: associate_objects(grounded, capture, assoc, providers.embeddings,
                                                           merge.z_tolerance))
    if not drafts:
        raise EmptyScene("no grounded object detections in the capture")
    logger.info("%d categories, %d node drafts", len(categories), len(drafts))

    frames = sorted(capture.frames, key=lambda f: f.frame_id)
    masks = {fid: [g.mask for g in gs] for fid, gs in grounded.items()}
    viewpoint = frames[0].center
    sps = _stage("superpoints", lambda: segment_superpoints(cloud, merge, viewpoint))
    sps = _stage("superpoints", lambda: embed_labels(assign_labels(sps, cloud, masks, frames, merge),
                                                     providers.embeddings))
    similarity = _stage("similarity", lambda: build_similarity(sps, cloud, frames, masks, merge))
    clusters, spectral = _stage("spectral", lambda: merge_superpoints(sps, similarity, merge))
    logger.info("%d superpoints merged into %d clusters (H=%s)", len(sps), len(clusters),
                None if spectral is None else spectral.chosen_clusters)
    semantic = _stage("semantics", lambda: attach_semantics(drafts, clusters, len(cloud), providers.embeddings))

    captions = _stage("captions", lambda: _pmap(
        lambda s: caption_node(_crops(s.draft, capture), providers.lvlm, providers.llm), semantic, jobs))
    nodes = [
        Node(s.draft.id, s.draft.point_indices, _quantized_feature(s.feature), cap,
             _quantized_box(bounding_box(cloud.points[s.draft.point_indices])), s.label)
        for s, cap in zip(semantic, captions)
    ]
    edges = _stage("edges", lambda: build_edges(nodes, providers.llm, jobs)) if len(nodes) >= 2 else []
    summary = _stage("scene_caption", lambda: scene_caption(nodes, providers.llm))
    return SceneGraph(nodes, edges, summary)
