from __future__ import annotations

import numpy as np
import pytest

from scenequery.agents.core import Agent, TranscriptLog
from scenequery.agents.oracle import OracleProvider
from scenequery.embeddings import MockEmbeddingProvider
from scenequery.evaluation.planted import generate_planted_scene
from scenequery.geometry import CameraFrame, look_at
from scenequery.scenegraph import Providers, build_graph


@pytest.fixture(scope="session")
def planted():
    return generate_planted_scene(7, 4, 4)


@pytest.fixture(scope="session")
def oracle_graph(planted):
    log = TranscriptLog()
    graph = build_graph(planted.capture, Providers.single(OracleProvider(planted), MockEmbeddingProvider(), log))
    return graph, log


@pytest.fixture
def oracle_agent(planted):
    return Agent(OracleProvider(planted))


def make_frame(frame_id=0, eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0), up=(0.0, -1.0, 0.0), size=64, f=50.0,
               depth=None) -> CameraFrame:
    """Square pinhole frame; with the defaults the camera sits at the origin looking down +z."""
    pose = look_at(eye, target, up)
    return CameraFrame(frame_id, f, f, size / 2, size / 2, pose, size, size, depth)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
