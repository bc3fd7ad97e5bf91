from __future__ import annotations

import json
from pathlib import Path

import pytest

from scenequery.cli import main
from scenequery.config import ConfigError, RunConfig, load_config_file
from scenequery.scenegraph import SceneGraph


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    """A generated seed-7 scene plus its oracle graph and transcript log."""
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene"
    assert main(["gen", "--seed", "7", "--out", str(scene)]) == 0
    graph = root / "graph.json"
    log = root / "transcripts.jsonl"
    assert main(["build", "--scene", str(scene), "--out", str(graph), "--transcripts", str(log)]) == 0
    return scene, graph, log


def tree(path: Path) -> dict:
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# --------------------------------------------------------------------------- config


def test_defaults_match_constants():
    cfg = RunConfig()
    assert (cfg.tau_iou, cfg.tau_sim, cfg.top_k_views, cfg.voxel_size, cfg.nn_threshold, cfg.assoc_threshold) == \
        (0.9, 0.9, 5, 0.025, 0.025, 1.1)


def test_file_then_flags(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('seed = 3\ntau_iou = 0.8\nprovider = "mock"\njobs = 2\n')
    cfg = RunConfig.from_sources(str(path), {"seed": 11, "jobs": None})
    assert (cfg.seed, cfg.tau_iou, cfg.provider, cfg.jobs) == (11, 0.8, "mock", 2)
    assert cfg.merge_config().tau_iou == 0.8


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    for text in ("nope = 1\n", "[table]\nx = 1\n", "tau_iou = 3.0\n", 'provider = "gpt"\n', "seed = 'abc'\n",
                 "= broken"):
        bad.write_text(text)
        with pytest.raises(ConfigError):
            RunConfig.from_sources(str(bad))
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "missing.toml"))
    with pytest.raises(ConfigError):
        RunConfig.from_sources(None, {"fixture": str(tmp_path / "absent.json")})


def test_echo_hides_secrets():
    echo = RunConfig(api_key="sk-secret").echo()
    assert "api_key" not in echo and "sk-secret" not in json.dumps(echo)


# --------------------------------------------------------------------------- gen


def test_gen_is_byte_identical(built, tmp_path):
    scene, _, _ = built
    assert main(["gen", "--seed", "7", "--out", str(tmp_path / "again")]) == 0
    assert tree(tmp_path / "again") == tree(scene)
    expected = {"manifest.json", "cloud.ply", "planted.json", "queries.jsonl", "run_config.json"}
    assert expected <= set(tree(scene))
    assert json.loads((scene / "run_config.json").read_text())["seed"] == 7


def test_gen_errors(tmp_path):
    assert main(["gen", "--objects", "1", "--out", str(tmp_path / "x")]) == 2
    assert main(["gen"]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--out", str(blocker / "sub")]) == 2


def test_config_flag_override_echoed(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 3\n")
    assert main(["gen", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "s")]) == 0
    assert json.loads((tmp_path / "s" / "run_config.json").read_text())["seed"] == 7
    assert main(["gen", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path / "t")]) == 2


# --------------------------------------------------------------------------- build


def test_build_planted_graph(built, tmp_path):
    scene, graph_path, _ = built
    graph = SceneGraph.loads(graph_path.read_text())
    assert len(graph.nodes) == 4
    assert graph.meta["config"]["provider"] == "oracle"
    again = tmp_path / "g2.json"
    assert main(["build", "--scene", str(scene), "--out", str(again)]) == 0
    assert again.read_bytes() == graph_path.read_bytes()


def test_build_replays_transcripts(built, tmp_path):
    scene, graph_path, log = built
    out = tmp_path / "replay.json"
    assert main(["build", "--scene", str(scene / "manifest.json"), "--provider", "mock", "--fixture", str(log),
                 "--out", str(out)]) == 0
    live, replay = json.loads(graph_path.read_text()), json.loads(out.read_text())
    assert replay["meta"]["transcripts_digest"] == live["meta"]["transcripts_digest"]
    live.pop("meta"), replay.pop("meta")
    assert live == replay


def test_build_exit_codes(built, tmp_path):
    scene, _, _ = built
    assert main(["build", "--scene", str(tmp_path / "nowhere")]) == 2
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    assert main(["build", "--scene", str(scene), "--provider", "mock", "--fixture", str(empty),
                 "--out", str(tmp_path / "g.json")]) == 4
    assert main(["build", "--scene", str(scene), "--provider", "mock", "--out", str(tmp_path / "g.json")]) == 2


def test_build_pipeline_failure_exit_3(built, tmp_path):
    scene, _, _ = built
    copy = tmp_path / "nodepth"
    for name, data in tree(scene).items():
        (copy / name).parent.mkdir(parents=True, exist_ok=True)
        (copy / name).write_bytes(data)
    doc = json.loads((copy / "manifest.json").read_text())
    for f in doc["frames"]:
        f.pop("depth_file")
    (copy / "manifest.json").write_text(json.dumps(doc))
    assert main(["build", "--scene", str(copy), "--out", str(tmp_path / "g.json")]) == 3


# --------------------------------------------------------------------------- query


def test_query_single_and_batch(built, tmp_path, capsys):
    scene, graph_path, _ = built
    planted = json.loads((scene / "planted.json").read_text())
    q = planted["queries"][0]
    assert main(["query", "--graph", str(graph_path), "--scene", str(scene), "--query", q["text"]]) == 0
    (row,) = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    graph = SceneGraph.loads(graph_path.read_text())
    gt_box = planted["objects"][q["gt_target"]]["box"]
    assert graph.node(row["target_id"]).box.to_dict() != {} and row["config"]["provider"] == "oracle"
    node_center = graph.node(row["target_id"]).box.center
    gt_center = [(a + b) / 2 for a, b in zip(gt_box["min"], gt_box["max"])]
    assert max(abs(a - b) for a, b in zip(node_center, gt_center)) < 0.1

    out = tmp_path / "answers.jsonl"
    assert main(["query", "--graph", str(graph_path), "--scene", str(scene), "--batch",
                 str(scene / "queries.jsonl"), "--out", str(out), "--explain", "--jobs", "4"]) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 20 and all("transcripts" in r and "error" not in r for r in rows)


def test_query_errors(built, tmp_path):
    scene, graph_path, _ = built
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["query", "--graph", str(bad), "--scene", str(scene), "--query", "the desk"]) == 2
    assert main(["query", "--graph", str(graph_path), "--scene", str(scene)]) == 2
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    out = tmp_path / "a.jsonl"
    assert main(["query", "--graph", str(graph_path), "--provider", "mock", "--fixture", str(empty),
                 "--query", "the desk", "--out", str(out)]) == 3
    assert "error" in json.loads(out.read_text())


# --------------------------------------------------------------------------- eval


def test_eval_grounding(built, tmp_path):
    scene, graph_path, _ = built
    out = tmp_path / "report.json"
    assert main(["eval", "grounding", "--graph", str(graph_path), "--scene", str(scene), "--batch",
                 str(scene / "queries.jsonl"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["metrics"] == {"Acc@0.25": 1.0, "Acc@0.5": 1.0, "top1_gt_boxes": 1.0}
    assert len(rep["samples"]) == 20 and rep["config"]["seed"] == 7


def test_eval_seg_and_sg(built, tmp_path):
    scene, graph_path, _ = built
    labels = tmp_path / "labels.txt"
    labels.write_text("desk\nchair\nbackground\ndesk\n")
    out = tmp_path / "seg.json"
    assert main(["eval", "seg", "--pred", str(labels), "--gt", str(labels), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["metrics"]["mIoU"] == 1.0

    assert main(["eval", "seg", "--graph", str(graph_path), "--scene", str(scene), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["metrics"]["object_point_accuracy"] >= 0.99

    out = tmp_path / "sg.json"
    assert main(["eval", "sg", "--graph", str(graph_path), "--gt", str(graph_path), "--out", str(out)]) == 0
    assert set(json.loads(out.read_text())["metrics"].values()) == {1.0}


def test_fixture_format_sniffed_not_suffix(built, tmp_path):
    scene, graph_path, log = built
    renamed = tmp_path / "replay.log"
    renamed.write_bytes(log.read_bytes())
    out = tmp_path / "g.json"
    assert main(["build", "--scene", str(scene), "--provider", "mock", "--fixture", str(renamed), "--out", str(out)]) == 0
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{broken\n")
    assert main(["build", "--scene", str(scene), "--provider", "mock", "--fixture", str(garbage), "--out", str(out)]) == 2
