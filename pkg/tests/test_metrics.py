from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenequery.embeddings import MockEmbeddingProvider, mock_embed
from scenequery.errors import EmptyGraph, IdMismatch, LengthMismatch
from scenequery.evaluation.metrics import (EvalReport, grounding_accuracy, grounding_ious, match_point_sets,
                                           planted_scene_graph, proposal_map, scene_graph_recall,
                                           segmentation_metrics, semantic_segment, top1_with_gt_boxes,
                                           transcripts_digest)
from scenequery.geometry import Box3D
from scenequery.scenegraph import Edge, Node, SceneGraph

EMB = MockEmbeddingProvider()


def unit_box(x0=0.0):
    return {"min": [x0, 0.0, 0.0], "max": [x0 + 1.0, 1.0, 1.0]}


def shifted(iou):
    """Unit box shifted along x so that its IoU with the unit box at the origin is ``iou``."""
    s = (1 - iou) / (1 + iou)
    return unit_box(s)


def iou_oracle(a, b):
    inter = np.prod([max(0.0, min(a["max"][d], b["max"][d]) - max(a["min"][d], b["min"][d])) for d in range(3)])
    vol = lambda x: np.prod(np.subtract(x["max"], x["min"]))  # noqa: E731
    return inter / (vol(a) + vol(b) - inter)


# --------------------------------------------------------------------------- grounding


def test_grounding_fixture():
    preds = [{"query_id": str(i), "box": shifted(v)} for i, v in enumerate([1.0, 0.3, 0.26, 0.1])]
    gts = [{"query_id": str(i), "box": unit_box()} for i in range(4)]
    assert grounding_accuracy(preds, gts, [0.25])[0.25] == 0.75
    assert grounding_accuracy(gts, gts, [0.25, 0.5, 0.75, 1.0]) == {0.25: 1.0, 0.5: 1.0, 0.75: 1.0, 1.0: 1.0}


def test_grounding_random_pairs_match_oracle(rng):
    preds, gts = [], []
    for i in range(10):
        for rows in (preds, gts):
            c = rng.uniform(0, 3, size=(2, 3))
            rows.append({"query_id": f"q{i}", "box": {"min": c.min(0).tolist(), "max": c.max(0).tolist()}})
    ious = [iou_oracle(p["box"], g["box"]) for p, g in zip(preds, gts)]
    got = grounding_ious(preds, gts)
    assert [got[f"q{i}"] for i in range(10)] == pytest.approx(ious, abs=1e-12)
    for t in (0.0, 0.05, 0.25, 0.5):
        assert grounding_accuracy(preds, gts, [t])[t] == sum(v >= t for v in ious) / 10


def test_grounding_permutation_invariant_and_ids(rng):
    preds = [{"query_id": str(i), "box": shifted(v)} for i, v in enumerate([0.9, 0.4, 0.2, 0.6, 0.3])]
    gts = [{"query_id": str(i), "box": unit_box()} for i in range(5)]
    base = grounding_accuracy(preds, gts)
    assert grounding_accuracy([preds[i] for i in rng.permutation(5)], gts) == base
    with pytest.raises(IdMismatch):
        grounding_accuracy(preds[:4], gts)
    with pytest.raises(IdMismatch):
        grounding_accuracy(preds + preds[:1], gts + gts[:1])


def test_top1_with_gt_boxes():
    answers = [{"query_id": f"q{i}", "target_id": t} for i, t in enumerate([10, 11, 12, 10, 11])]
    gts = [{"query_id": f"q{i}", "gt_target_id": g} for i, g in enumerate([0, 1, 2, 2, 2])]
    proposals = {10: 0, 11: 1, 12: 2}
    assert top1_with_gt_boxes(answers, gts, proposals) == 0.6
    assert top1_with_gt_boxes(answers[:3], gts[:3], proposals) == 1.0
    assert top1_with_gt_boxes(answers[3:], gts[3:], proposals) == 0.0
    with pytest.raises(IdMismatch):
        top1_with_gt_boxes(answers, gts, {10: 0})


# --------------------------------------------------------------------------- segmentation


def test_segmentation_fixture_exact():
    gt = ["A"] * 80 + ["B"] * 20
    pred = ["A"] * 100
    m = segmentation_metrics(pred, gt, ["A", "B"])
    assert m == {"mAcc": 0.5, "mIoU": 0.4, "fmIoU": 0.64}


def test_segmentation_identity_single_class_and_absent():
    gt = ["a", "b", "c", "a"]
    assert segmentation_metrics(gt, gt, ["a", "b", "c", "zebra"]) == {"mAcc": 1.0, "mIoU": 1.0, "fmIoU": 1.0}
    m = segmentation_metrics(["x", "y", "x", "x"], ["x"] * 4, ["x"])
    assert m["mAcc"] == m["mIoU"] == m["fmIoU"] == 0.75
    with pytest.raises(LengthMismatch):
        segmentation_metrics(["a"], ["a", "b"], ["a"])


@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_segmentation_permutation_invariant(labels, rnd):
    pred = [labels[(i * 7) % len(labels)] for i in range(len(labels))]
    order = list(range(len(labels)))
    rnd.shuffle(order)
    a = segmentation_metrics(pred, labels, "abc")
    b = segmentation_metrics([pred[i] for i in order], [labels[i] for i in order], "abc")
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(1, 10), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_balanced_fmiou_equals_miou(per_class, n_classes, seed):
    classes = [f"c{i}" for i in range(n_classes)]
    gt = [c for c in classes for _ in range(per_class)]
    pred = list(np.random.default_rng(seed).choice(classes, size=len(gt)))
    m = segmentation_metrics(pred, gt, classes)
    assert m["fmIoU"] == pytest.approx(m["mIoU"], abs=1e-12)


def graph_from(labels, points_per=5, edges=(), feature_labels=None):
    feature_labels = feature_labels or labels
    nodes = [Node(i, np.arange(i * points_per, (i + 1) * points_per), EMB.embed_text(f), f"a {l}",
                  Box3D((i, 0, 0), (i + 1, 1, 1)), l) for i, (l, f) in enumerate(zip(labels, feature_labels))]
    return SceneGraph(nodes, [Edge(a, b, r, float(abs(a - b))) for a, b, r in edges])


def test_semantic_segment_own_labels():
    g = graph_from(["desk", "chair"])
    labels = semantic_segment(g, ["chair", "desk", "lamp"], EMB, 12)
    assert labels.tolist() == ["desk"] * 5 + ["chair"] * 5 + ["background"] * 2
    assert set(semantic_segment(g, [], EMB, 12)) == {"background"}


def test_oracle_segmentation_on_planted(planted, oracle_graph):
    graph, _ = oracle_graph
    gt = planted.point_labels()
    pred = semantic_segment(graph, planted.categories, EMB, len(gt))
    obj = gt != "background"
    assert np.mean(pred[obj] == gt[obj]) >= 0.99


# --------------------------------------------------------------------------- scene-graph recall


def test_identical_graphs_full_recall():
    g = graph_from(["desk", "chair", "lamp", "desk"], edges=[(0, 1, "near"), (2, 0, "on"), (1, 3, "left of")])
    r = scene_graph_recall(g, g, EMB, object_ks=(1, 5), predicate_ks=(1, 3), relationship_ks=(1, 50, 100))
    assert r["object_R@1"] == 1.0 and r["predicate_R@1"] == 1.0 and r["relationship_R@50"] == 1.0
    assert all(v == 1.0 for k, v in r.items() if not k.endswith("@1") or k.startswith(("object", "predicate")))


def test_missing_triplet_counts_as_miss():
    gt = graph_from(["desk", "chair", "lamp"], edges=[(0, 1, "near"), (1, 2, "near")])
    pred = graph_from(["desk", "chair", "lamp"], edges=[(0, 1, "near")])
    r = scene_graph_recall(pred, gt, EMB, relationship_ks=(100,))
    assert r["relationship_R@100"] == 0.5 and r["predicate_R@3"] == 0.5


def test_ten_nodes_two_mislabeled():
    vocab = ["desk", "chair", "lamp", "sofa", "bin"]
    labels = [vocab[i % 5] for i in range(10)]
    wrong = list(labels)
    wrong[2], wrong[7] = "sofa", "desk"
    gt, pred = graph_from(labels), graph_from(labels, feature_labels=wrong)
    r = scene_graph_recall(pred, gt, EMB, object_ks=(1,), predicate_ks=(), relationship_ks=())
    emb = np.stack([EMB.embed_text(v).values for v in vocab])
    top1 = [vocab[int(np.argmax(emb @ n.feature.values))] for n in pred.nodes]
    assert r["object_R@1"] == np.mean([t == l for t, l in zip(top1, labels)]) == 0.8


def test_recall_matches_by_points_not_ids():
    gt = graph_from(["desk", "chair"])
    nodes = [Node(7 + i, n.point_indices, n.feature, n.caption, n.box, n.semantic_label)
             for i, n in enumerate(reversed(gt.nodes))]
    r = scene_graph_recall(SceneGraph(nodes, []), gt, EMB, object_ks=(1,), predicate_ks=(), relationship_ks=())
    assert r["object_R@1"] == 1.0


def test_recall_needs_nodes():
    with pytest.raises(EmptyGraph):
        scene_graph_recall(SceneGraph([], []), graph_from(["desk"]), EMB)


def test_oracle_graph_recall_on_planted(planted, oracle_graph):
    graph, _ = oracle_graph
    gt = planted_scene_graph(planted, EMB)
    r = scene_graph_recall(graph, gt, EMB, object_ks=(1,), predicate_ks=(1,), relationship_ks=(50,),
                           predicate_vocab=["on", "near", "left of", "right of", "far from"])
    # the predicted graph keeps a spanning tree plus overlaps, so only gt pairs it kept can be recalled
    mapping = proposal_map(graph, planted)
    to_node = {obj: node for node, obj in mapping.items()}
    kept = {(e.a, e.b): e.relation for e in graph.edges}
    hits = [kept.get((to_node[e.a], to_node[e.b])) == e.relation for e in gt.edges]
    assert r["object_R@1"] == 1.0
    assert r["predicate_R@1"] == r["relationship_R@50"] == np.mean(hits) == len(graph.edges) / len(gt.edges)


def test_match_point_sets_hungarian():
    pred = [np.array([0, 1, 2, 3]), np.array([4, 5]), np.array([9])]
    gt = [np.array([4, 5, 6]), np.array([0, 1, 2, 3, 4])]
    assert match_point_sets(pred, gt) == {0: 1, 1: 0}
    assert match_point_sets([], gt) == {}


def test_proposal_map_on_planted(planted, oracle_graph):
    graph, _ = oracle_graph
    mapping = proposal_map(graph, planted)
    assert sorted(mapping.values()) == list(range(len(planted.objects)))
    for node_id, obj in mapping.items():
        assert planted.nearest_object(graph.node(node_id).box.center) == obj


# --------------------------------------------------------------------------- reports


def test_report_json_and_table():
    rep = EvalReport("grounding", {"Acc@0.25": 1.0, "Acc@0.5": 0.5}, [{"query_id": "a"}, {"query_id": "b"}],
                     {"seed": 7}, transcripts_digest(["b", "a"]))
    doc = json.loads(rep.to_json())
    assert doc["metrics"]["Acc@0.5"] == 0.5 and doc["transcripts_digest"] == transcripts_digest(["a", "b"])
    assert "Acc@0.25" in rep.table() and "2 samples" in rep.table()
    with pytest.raises(ValueError):
        EvalReport("x", {"m": 1.5})
