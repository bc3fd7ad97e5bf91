"""Superpoint over-segmentation, visibility gating and the superpoint similarity matrix."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .embeddings import EmbeddingProvider, Feature, cosine_matrix
from .errors import MissingLabelFeature, TooFewPoints
from .geometry import DEFAULT_Z_TOLERANCE, CameraFrame, Mask2D, PointCloud, estimate_normals, project_to_pixels
from .spectral import SpectralResult, connected_components, spectral_cluster

logger = logging.getLogger(__name__)

UNKNOWN_LABEL = "unknown"


@dataclass(frozen=True)
class MergeConfig:
    tau_iou: float = 0.9
    tau_sim: float = 0.9
    top_k_views: int = 5
    z_tolerance: float = DEFAULT_Z_TOLERANCE
    graphcut_k: int = 10
    graphcut_kappa: float = 0.08

    def __post_init__(self):
        if not (0.0 <= self.tau_iou <= 1.0 and 0.0 <= self.tau_sim <= 1.0):
            raise ValueError("tau_iou and tau_sim must lie in [0, 1]")
        if self.top_k_views < 1 or self.graphcut_k < 1:
            raise ValueError("top_k_views and graphcut_k must be positive")
        if self.z_tolerance <= 0 or self.graphcut_kappa <= 0:
            raise ValueError("z_tolerance and graphcut_kappa must be positive")


@dataclass(frozen=True, eq=False)
class Superpoint:
    id: int
    point_indices: np.ndarray
    label: Optional[str] = None
    label_feature: Optional[Feature] = None

    def __post_init__(self):
        idx = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        if len(idx) == 0:
            raise ValueError(f"superpoint {self.id} is empty")
        object.__setattr__(self, "point_indices", idx)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Superpoint) and self.id == other.id and self.label == other.label
                and np.array_equal(self.point_indices, other.point_indices)
                and self.label_feature == other.label_feature)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "point_indices": self.point_indices.tolist(),
            "label": self.label,
            "label_feature": None if self.label_feature is None else self.label_feature.values.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Superpoint":
        feat = doc.get("label_feature")
        return cls(int(doc["id"]), np.asarray(doc["point_indices"], dtype=np.int64), doc.get("label"),
                   None if feat is None else Feature(np.asarray(feat, dtype=np.float64)))


def superpoints_to_json(sps: Sequence[Superpoint]) -> str:
    return json.dumps([sp.to_dict() for sp in sps])


def superpoints_from_json(text: str) -> list[Superpoint]:
    return [Superpoint.from_dict(d) for d in json.loads(text)]


@dataclass(eq=False)
class SimilarityMatrix:
    entries: np.ndarray
    superpoint_ids: list[int]

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.shape != (len(self.superpoint_ids),) * 2:
            raise ValueError("similarity entries must be S x S")
        if not np.all(np.isfinite(e)) or np.any(e < 0) or not np.allclose(e, e.T, atol=1e-9, rtol=0):
            raise ValueError("similarity must be finite, non-negative and symmetric")
        self.entries = e


# --------------------------------------------------------------------------- segmentation


def _knn_edges(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    _, nbr = cKDTree(points).query(points, k=k + 1)
    src = np.repeat(np.arange(len(points)), k)
    dst = np.asarray(nbr)[:, 1:].reshape(-1)
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    pairs = np.unique(np.stack([lo, hi], axis=1)[lo != hi], axis=0)
    return pairs[:, 0], pairs[:, 1]


def segment_superpoints(cloud: PointCloud, config: MergeConfig = MergeConfig(),
                        viewpoint: Optional[Sequence[float]] = None) -> list[Superpoint]:
    """Felzenszwalb-Huttenlocher graph segmentation on the symmetric k-NN graph.

    Edge weight is ``(1 - cos(n_i, n_j)) + 0.5 * ||rgb_i - rgb_j||``. Components
    are merged when the edge is no heavier than both components' internal
    difference plus ``kappa / size``.
    """
    n, k = len(cloud), config.graphcut_k
    if n < k + 1:
        raise TooFewPoints(f"segmentation needs at least {k + 1} points, got {n}")
    normals = cloud.normals if cloud.normals is not None else estimate_normals(cloud.points, viewpoint=viewpoint)
    src, dst = _knn_edges(cloud.points, k)
    weight = 1.0 - np.einsum("ij,ij->i", normals[src], normals[dst])
    if cloud.colors is not None:
        weight = weight + 0.5 * np.linalg.norm(cloud.colors[src] - cloud.colors[dst], axis=1)
    weight = np.maximum(weight, 0.0)
    order = np.lexsort((dst, src, weight))

    parent = list(range(n))
    size = [1] * n
    internal = [0.0] * n
    kappa = config.graphcut_kappa

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for e in order.tolist():
        a, b, w = find(int(src[e])), find(int(dst[e])), float(weight[e])
        if a == b:
            continue
        if w <= internal[a] + kappa / size[a] and w <= internal[b] + kappa / size[b]:
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            internal[a] = max(internal[a], internal[b], w)

    roots = np.array([find(i) for i in range(n)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # order superpoints by their smallest point index
    rank = np.empty(len(first), dtype=int)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    comp = rank[inverse.reshape(-1)]
    groups = np.argsort(comp, kind="stable")
    bounds = np.cumsum(np.bincount(comp))
    out, start = [], 0
    for sid, stop in enumerate(bounds):
        out.append(Superpoint(sid, groups[start:stop]))
        start = stop
    return out


# --------------------------------------------------------------------------- visibility


class _FrameView:
    """Per-frame projection of the whole cloud, shared by every superpoint."""

    def __init__(self, cloud: PointCloud, frame: CameraFrame, masks: Sequence[Mask2D], z_tolerance: float):
        rows, cols, keep = project_to_pixels(cloud.points, frame, z_tolerance)
        self.pixel = np.where(keep, rows * frame.width + cols, -1)
        self.masks = list(masks)
        self.flat = [m.bitmap.reshape(-1) for m in self.masks]
        self.areas = [int(f.sum()) for f in self.flat]

    def ious(self, point_indices: np.ndarray) -> np.ndarray:
        pix = self.pixel[point_indices]
        pix = np.unique(pix[pix >= 0])
        if len(pix) == 0 or not self.masks:
            return np.zeros(len(self.masks))
        out = np.empty(len(self.masks))
        for i, (flat, area) in enumerate(zip(self.flat, self.areas)):
            inter = int(flat[pix].sum())
            out[i] = inter / (len(pix) + area - inter)
        return out


def visibility_gate(sp: Superpoint, cloud: PointCloud, frame: CameraFrame, frame_masks: Sequence[Mask2D],
                    tau_iou: float, z_tolerance: float = DEFAULT_Z_TOLERANCE) -> int:
    """1 iff the projected superpoint matches some mask of the frame with IoU strictly above ``tau_iou``."""
    masks = [m for m in frame_masks if m.frame_id == frame.frame_id]
    ious = _FrameView(cloud, frame, masks, z_tolerance).ious(sp.point_indices)
    return int(len(ious) > 0 and ious.max() > tau_iou)


def _gate_matrix(sps, cloud, frames, masks, config) -> np.ndarray:
    gates = np.zeros((len(sps), len(frames)))
    for m, frame in enumerate(frames):
        view = _FrameView(cloud, frame, masks.get(frame.frame_id, []), config.z_tolerance)
        for i, sp in enumerate(sps):
            ious = view.ious(sp.point_indices)
            gates[i, m] = float(len(ious) > 0 and ious.max() > config.tau_iou)
    return gates


def build_similarity(sps: Sequence[Superpoint], cloud: PointCloud, frames: Sequence[CameraFrame],
                     masks: Mapping[int, Sequence[Mask2D]], config: MergeConfig = MergeConfig()) -> SimilarityMatrix:
    """``A_ij = (sum_m g_im * g_jm) * cos(f_Qi, f_Qj)``, negatives clamped to zero."""
    missing = [sp.id for sp in sps if sp.label_feature is None]
    if missing:
        raise MissingLabelFeature(f"superpoints without label feature: {missing[:10]}")
    gates = _gate_matrix(sps, cloud, frames, masks, config)
    covis = gates @ gates.T
    cos = cosine_matrix([sp.label_feature for sp in sps])
    np.fill_diagonal(cos, 1.0)
    a = np.maximum(covis * cos, 0.0)
    a = (a + a.T) / 2.0
    return SimilarityMatrix(a, [sp.id for sp in sps])


def assign_labels(sps: Sequence[Superpoint], cloud: PointCloud, masks: Mapping[int, Sequence[Mask2D]],
                  frames: Sequence[CameraFrame], config: MergeConfig = MergeConfig()) -> list[Superpoint]:
    """Majority label of each superpoint's best-matching mask over its top-k views."""
    votes: list[list[tuple[float, int, str]]] = [[] for _ in sps]
    for m, frame in enumerate(frames):
        view = _FrameView(cloud, frame, masks.get(frame.frame_id, []), config.z_tolerance)
        if not view.masks:
            continue
        for i, sp in enumerate(sps):
            ious = view.ious(sp.point_indices)
            best = int(np.argmax(ious))
            if ious[best] > 0:
                votes[i].append((float(ious[best]), m, view.masks[best].label))
    out = []
    for sp, vs in zip(sps, votes):
        if not vs:
            out.append(replace(sp, label=UNKNOWN_LABEL))
            continue
        top = sorted(vs, key=lambda t: (-t[0], t[1]))[: config.top_k_views]
        counts = Counter(lbl for _, _, lbl in top)
        weight = Counter()
        for iou, _, lbl in top:
            weight[lbl] += iou
        label = min(counts, key=lambda l: (-counts[l], -weight[l], l))
        out.append(replace(sp, label=label))
    return out


def embed_labels(sps: Sequence[Superpoint], provider: EmbeddingProvider) -> list[Superpoint]:
    return [replace(sp, label_feature=provider.embed_text(sp.label or UNKNOWN_LABEL)) for sp in sps]


# --------------------------------------------------------------------------- merging


@dataclass(frozen=True, eq=False)
class SuperpointCluster:
    id: int
    member_ids: tuple[int, ...]
    label: str
    point_indices: np.ndarray = field(repr=False)


def _majority_label(members: Sequence[Superpoint]) -> str:
    counts = Counter(sp.label or UNKNOWN_LABEL for sp in members)
    points = Counter()
    for sp in members:
        points[sp.label or UNKNOWN_LABEL] += len(sp.point_indices)
    return min(counts, key=lambda l: (-counts[l], -points[l], l))


def merge_superpoints(sps: Sequence[Superpoint], similarity: SimilarityMatrix,
                      config: MergeConfig = MergeConfig()) -> tuple[list[SuperpointCluster], Optional[SpectralResult]]:
    """Spectral merge followed by the label-consistency gate.

    A merged cluster whose mean pairwise label cosine falls below ``tau_sim``
    is split back into singleton superpoints.
    """
    by_id = {sp.id: sp for sp in sps}
    ids = list(similarity.superpoint_ids)
    result = None
    if len(ids) >= 3:
        result = spectral_cluster(similarity.entries, ids)
        groups = result.clusters()
    else:
        comp = connected_components(similarity.entries)
        groups = [[ids[i] for i in np.flatnonzero(comp == c)] for c in range(comp.max() + 1 if len(comp) else 0)]

    gated: list[list[int]] = []
    split = 0
    for members in groups:
        if len(members) > 1:
            feats = [by_id[i].label_feature for i in members]
            cos = cosine_matrix(feats)
            iu = np.triu_indices(len(members), 1)
            if cos[iu].mean() < config.tau_sim:
                gated.extend([i] for i in members)
                split += 1
                continue
        gated.append(members)
    if split:
        logger.debug("label gate split %d clusters into singletons", split)
    gated.sort(key=lambda ms: min(ms))
    clusters = []
    for cid, members in enumerate(gated):
        sp_members = [by_id[i] for i in members]
        pts = np.unique(np.concatenate([sp.point_indices for sp in sp_members]))
        clusters.append(SuperpointCluster(cid, tuple(sorted(members)), _majority_label(sp_members), pts))
    return clusters, result
