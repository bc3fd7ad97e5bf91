from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_frame
from oracles import kruskal, union_find_components
from scenequery.agents import Agent, MockProvider
from scenequery.agents.oracle import OracleProvider
from scenequery.capture import SceneCapture
from scenequery.embeddings import Feature, MockEmbeddingProvider, fuse_features, mock_embed
from scenequery.errors import EmptyScene, MissingDepth, ParseFailure, StageError
from scenequery.geometry import Box3D, CameraFrame, Mask2D, PointCloud, backproject_mask, box_iou, center_distance
from scenequery.scenegraph import (AssocConfig, Edge, GroundedMask, Node, NodeDraft, Providers, SceneGraph,
                                   associate_objects, attach_semantics, build_edges, build_graph, detect_objects,
                                   minimum_spanning_tree, quantize, scene_caption, select_edge_pairs, singularize)
from scenequery.superpoints import SuperpointCluster

EMB = MockEmbeddingProvider()


# --------------------------------------------------------------------------- fixtures


def render(points: np.ndarray, frame: CameraFrame) -> CameraFrame:
    """Frame with a z-buffered depth map of ``points`` (0 where nothing projects)."""
    cam = frame.world_to_camera(points)
    depth = np.zeros(frame.shape, dtype=np.float32)
    front = cam[:, 2] > 0
    u = np.floor(frame.fx * cam[front, 0] / cam[front, 2] + frame.cx + 0.5).astype(int)
    v = np.floor(frame.fy * cam[front, 1] / cam[front, 2] + frame.cy + 0.5).astype(int)
    z = cam[front, 2]
    inside = (u >= 0) & (u < frame.width) & (v >= 0) & (v < frame.height)
    for r, c, d in sorted(zip(v[inside], u[inside], z[inside]), key=lambda t: -t[2]):
        depth[r, c] = d
    return CameraFrame(frame.frame_id, frame.fx, frame.fy, frame.cx, frame.cy, frame.pose, frame.width,
                       frame.height, depth)


def square(x_offset: float) -> np.ndarray:
    """Fronto-parallel 0.8 m square at z = 2 sampled on the pixel grid of a camera at (x_offset, 0, 0)."""
    bitmap = np.zeros((64, 64), dtype=bool)
    bitmap[22:42, 22:42] = True
    frame = make_frame(eye=(x_offset, 0, 0), target=(x_offset, 0, 1), depth=np.full((64, 64), 2.0, np.float32))
    return backproject_mask(Mask2D(0, bitmap), frame)


def two_view_capture(second_eye_x: float, labels=("desk", "desk"), far_object=False):
    pts = [square(0.0)] + ([square(5.0)] if far_object else [])
    cloud = np.vstack(pts)
    frames, masks = [], {}
    for fid, x in enumerate((0.0, second_eye_x)):
        f = render(cloud, make_frame(fid, eye=(x, 0, 0), target=(x, 0, 1)))
        frames.append(f)
        masks[fid] = [Mask2D(fid, f.depth > 0, labels[fid])]
    return SceneCapture(PointCloud(cloud), frames, masks)


def grounded_all(capture):
    return {fid: [GroundedMask(fid, i, m) for i, m in enumerate(ms)] for fid, ms in capture.masks.items()}


def box_node(i, lo, hi, label="thing"):
    return Node(i, [i], mock_embed(label), f"a {label}", Box3D(tuple(lo), tuple(hi)), label)


# --------------------------------------------------------------------------- detection


def test_detect_drops_hallucinations():
    cap = two_view_capture(0.08)
    lvlm = Agent(MockProvider(by_task={"list_objects": "desks, dragon"}))
    cats, grounded = detect_objects(cap, lvlm)
    assert cats == ["desk"]
    assert [g.mask_index for g in grounded[0]] == [0]


def test_detect_no_frames():
    cap = SceneCapture(PointCloud(np.ones((1, 3))), [])
    assert detect_objects(cap, Agent(MockProvider())) == ([], {})


def test_detect_oracle_categories(planted, oracle_agent):
    cats, grounded = detect_objects(planted.capture, oracle_agent)
    assert cats == planted.categories
    assert sum(len(g) for g in grounded.values()) == sum(len(m) for m in planted.capture.masks.values())


def test_singularize():
    assert [singularize(w) for w in ["Boxes", "shelves", "lamps", "glass", "bus", "batteries"]] == \
        ["box", "shelve", "lamp", "glass", "bus", "battery"]


# --------------------------------------------------------------------------- association


def test_same_object_two_views_is_one_draft():
    cap = two_view_capture(0.08)
    drafts = associate_objects(grounded_all(cap), cap, AssocConfig(), EMB)
    assert len(drafts) == 1
    assert len(drafts[0].detections) == 2
    assert np.array_equal(drafts[0].point_indices, np.arange(len(cap.cloud)))


@pytest.mark.parametrize("labels", [("desk", "chair"), ("desk", "desk")])
def test_far_objects_stay_apart(labels):
    cap = two_view_capture(5.0, labels, far_object=True)
    drafts = associate_objects(grounded_all(cap), cap, AssocConfig(), EMB)
    assert len(drafts) == 2
    assert not set(drafts[0].point_indices) & set(drafts[1].point_indices)


def test_association_threshold_needs_geometry():
    # pure feature agreement scores 1.0 which is below the 1.1 threshold
    cap = two_view_capture(5.0, ("desk", "desk"), far_object=True)
    drafts = associate_objects(grounded_all(cap), cap, AssocConfig(assoc_threshold=0.99), EMB)
    assert len(drafts) == 1


def test_association_empty_and_missing_depth():
    cap = two_view_capture(0.08)
    assert associate_objects({0: [], 1: []}, cap, AssocConfig(), EMB) == []
    bare = SceneCapture(cap.cloud, [make_frame(0)], {0: [cap.masks[0][0]]})
    with pytest.raises(MissingDepth):
        associate_objects(grounded_all(bare), bare, AssocConfig(), EMB)


def test_assoc_config_positive():
    with pytest.raises(ValueError):
        AssocConfig(voxel_size=0)


# --------------------------------------------------------------------------- semantics


def draft_with(indices, label="desk"):
    feat = mock_embed(label)
    return NodeDraft(0, [], np.zeros((1, 3)), feat.values.copy(), np.asarray(indices))


def cluster(cid, indices, label):
    return SuperpointCluster(cid, (cid,), label, np.asarray(indices))


def test_attach_semantics_majority_overlap():
    d = draft_with(range(10), label="visual")
    clusters = [cluster(0, range(0, 6), "desk"), cluster(1, range(6, 20), "chair")]
    (s,) = attach_semantics([d], clusters, 20, EMB)
    overlap = {c.label: len(set(c.point_indices) & set(range(10))) for c in clusters}
    assert s.label == max(overlap, key=overlap.get) == "desk"
    assert s.feature == fuse_features(d.feature, EMB.embed_text("desk"))


def test_attach_semantics_no_overlap_is_unknown():
    d = draft_with([15, 16])
    (s,) = attach_semantics([d], [cluster(0, range(5), "desk")], 20, EMB)
    assert s.label == "unknown" and s.feature == d.feature


# --------------------------------------------------------------------------- edges


def test_two_nodes_one_edge():
    nodes = [box_node(0, (0, 0, 0), (1, 1, 1)), box_node(1, (3, 0, 0), (4, 1, 1))]
    (e,) = build_edges(nodes, Agent(MockProvider(by_task={"relation_label": "near"})))
    assert (e.a, e.b, e.relation) == (0, 1, "near") and e.distance == 3.0


def test_collinear_chain_matches_kruskal():
    n = 7
    nodes = [box_node(i, (2.0 * i, 0, 0), (2.0 * i + 1, 1, 1)) for i in range(n)]
    w = np.array([[0 if i == j else 1 + 0.001 * center_distance(a.box, b.box) for j, b in enumerate(nodes)]
                  for i, a in enumerate(nodes)])
    pairs = select_edge_pairs(nodes)
    assert set(pairs) == kruskal(w) == {(i, i + 1) for i in range(n - 1)}


def test_overlapping_pair_is_kept_once():
    s = 2.0 / 3.0  # IoU (1 - s) / (1 + s) = 0.2
    nodes = [box_node(0, (0, 0, 0), (1, 1, 1)), box_node(1, (s, 0, 0), (1 + s, 1, 1)),
             box_node(2, (6, 0, 0), (7, 1, 1))]
    assert box_iou(nodes[0].box, nodes[1].box) == pytest.approx(0.2)
    assert select_edge_pairs(nodes) == [(0, 1), (1, 2)]


def test_overlap_edges_added_beyond_tree():
    nodes = [box_node(0, (0, 0, 0), (1, 1, 1)), box_node(1, (0.3, 0, 0), (1.3, 1, 1)),
             box_node(2, (0.6, 0, 0), (1.6, 1, 1))]
    assert box_iou(nodes[0].box, nodes[2].box) > 0.05
    assert select_edge_pairs(nodes) == [(0, 1), (0, 2), (1, 2)]
    assert len(minimum_spanning_tree(np.ones((3, 3)))) == 2


def test_mst_matches_kruskal_random(rng):
    for _ in range(100):
        n = int(rng.integers(2, 13))
        w = rng.uniform(0, 1, (n, n))
        w = (w + w.T) / 2
        assert set(minimum_spanning_tree(w)) == kruskal(w)


def test_scene_caption_cases():
    nodes = [box_node(0, (0, 0, 0), (1, 1, 1), "desk")]
    assert scene_caption(nodes, Agent(MockProvider(by_task={"scene_caption": "An office."}))) == "An office."
    with pytest.raises(ValueError):
        scene_caption([], Agent(MockProvider(default="x")))


# --------------------------------------------------------------------------- pipeline


def test_oracle_graph_matches_planted(planted, oracle_graph):
    graph, _ = oracle_graph
    assert len(graph.nodes) == len(planted.objects) == 4
    labels = sorted(n.semantic_label for n in graph.nodes)
    assert labels == sorted(o.category for o in planted.objects)
    assert len(graph.edges) >= 3
    for n in graph.nodes:
        obj = planted.nearest_object(n.box.center)
        assert n.semantic_label == planted.objects[obj].category
        assert n.caption == planted.objects[obj].caption
    assert graph.scene_caption == "; ".join(n.caption for n in graph.nodes)


def test_graph_invariants(oracle_graph):
    graph, _ = oracle_graph
    for e in graph.edges:
        assert abs(e.distance - center_distance(graph.node(e.a).box, graph.node(e.b).box)) <= 1e-9
    seen = set()
    for n in graph.nodes:
        assert not seen & set(n.point_indices.tolist())
        seen |= set(n.point_indices.tolist())
        assert abs(np.linalg.norm(n.feature.values) - 1) <= 1e-6
    # the kept edges connect every node
    adj = np.zeros((len(graph.nodes),) * 2)
    index = {n.id: i for i, n in enumerate(graph.nodes)}
    for e in graph.edges:
        adj[index[e.a], index[e.b]] = adj[index[e.b], index[e.a]] = 1
    assert union_find_components(adj) == 1


def test_graph_roundtrip_exact(oracle_graph):
    graph, _ = oracle_graph
    text = graph.dumps()
    back = SceneGraph.loads(text)
    assert back == graph and back.dumps() == text
    doc = json.loads(text)
    assert list(doc) == ["scene_caption", "nodes", "edges"]
    assert list(doc["nodes"][0]) == ["id", "label", "caption", "box", "feature", "point_indices"]
    assert all(v == quantize(v) for v in doc["nodes"][0]["feature"])


def test_build_is_deterministic(planted, oracle_graph):
    graph, _ = oracle_graph
    again = build_graph(planted.capture, Providers.single(OracleProvider(planted), MockEmbeddingProvider()), jobs=3)
    assert again.dumps() == graph.dumps()


def test_graph_validation():
    n0, n1 = box_node(0, (0, 0, 0), (1, 1, 1)), box_node(1, (2, 0, 0), (3, 1, 1))
    with pytest.raises(ValueError):
        SceneGraph([n0, n1], [Edge(0, 1, "near", 2.0), Edge(1, 0, "near", 2.0)])
    with pytest.raises(ValueError):
        SceneGraph([n0], [Edge(0, 5, "near", 1.0)])
    with pytest.raises(ValueError):
        Edge(0, 0, "near", 0.0)
    with pytest.raises(ValueError):
        Edge(0, 1, "", 0.0)


def test_empty_scene():
    with pytest.raises(EmptyScene):
        build_graph(SceneCapture(PointCloud(np.ones((1, 3))), []), Providers.single(MockProvider(), EMB))
    cap = two_view_capture(0.08)
    providers = Providers.single(MockProvider(by_task={"list_objects": "dragon"}), EMB)
    with pytest.raises(EmptyScene):
        build_graph(cap, providers)


def test_stage_errors_are_annotated():
    cap = two_view_capture(0.08)
    providers = Providers.single(MockProvider(by_task={"list_objects": ""}), EMB)
    with pytest.raises(StageError) as info:
        build_graph(cap, providers)
    assert info.value.stage == "detect" and isinstance(info.value.cause, ParseFailure)


def test_node_requires_points():
    with pytest.raises(ValueError):
        Node(0, [], Feature(np.eye(2)[0]), "", Box3D((0, 0, 0), (1, 1, 1)), "x")
