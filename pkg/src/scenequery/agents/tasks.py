"""Prompt construction and response parsing for the scene-graph agents."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..embeddings import crop_data_url
from ..errors import ParseFailure
from ..geometry import CameraFrame, Mask2D
from .core import Agent, AgentRequest, ImageRef, Message

MAX_CAPTION_VIEWS = 10

LIST_OBJECTS_PROMPT = (
    "Name every distinct central object visible in this image. Focus on smaller or overlooked objects "
    "as well as large furniture, and ignore walls, floor, ceiling and other background. "
    "Reply with a comma-separated list of short category names."
)
DESCRIBE_PROMPT = "Describe the central object in this image in one short phrase, including its color."
DISTILL_PROMPT = (
    "The following descriptions were written for different views of the same object. "
    "Combine them into one coherent, short caption of that object. Reply with the caption only.\n{views}"
)
RELATION_PROMPT = (
    "Object 1: {a_caption}, box center at {a_center}.\n"
    "Object 2: {b_caption}, box center at {b_center}.\n"
    "Coordinates are in meters, z is up. What is the relationship between 1 and 2? "
    "Reply with a short spatial phrase describing object 1 relative to object 2, such as "
    "'on', 'near', 'left of', 'right of', 'under'."
)
SCENE_PROMPT = (
    "Here are captions of the objects found in a 3D scene:\n{captions}\n"
    "Summarize the scene in two or three sentences."
)
SYSTEM_PROMPT = "You are a precise assistant for 3D indoor scene understanding."


@dataclass(frozen=True)
class NodeSummary:
    id: int
    caption: str
    center: tuple[float, float, float]


@dataclass(frozen=True)
class Crop:
    frame: CameraFrame
    mask: Mask2D
    mask_index: int


def _fmt_point(p: Sequence[float]) -> str:
    return "(" + ", ".join(f"{float(v):.2f}" for v in p) + ")"


def parse_object_list(raw: str) -> list[str]:
    items = []
    seen = set()
    for chunk in re.split(r"[,\n;]", raw):
        name = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", chunk).strip().strip(".").strip().lower()
        if name and name not in seen:
            seen.add(name)
            items.append(name)
    if not items:
        raise ParseFailure("no objects in response")
    return items


def list_objects(frame: CameraFrame, agent: Agent, max_retries: int = 2) -> list[str]:
    """Object categories the LVLM reports for one frame, de-duplicated case-insensitively."""
    image = None
    if frame.color is not None:
        full = Mask2D(frame.frame_id, np.ones(frame.shape, dtype=bool))
        image = ImageRef(frame.frame_id, (0, 0, frame.height - 1, frame.width - 1), crop_data_url(frame, full, 0.0))
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT), Message("user", LIST_OBJECTS_PROMPT, image)),
        max_retries=max_retries, task="list_objects", context={"frame_id": frame.frame_id},
    )
    return agent.run(req, parse_object_list).parsed


def _clean_text(raw: str) -> str:
    text = (raw or "").strip().strip('"').strip()
    if not text:
        raise ParseFailure("empty response")
    return text


def describe_crop(crop: Crop, agent: Agent, max_retries: int = 2) -> str:
    ref = ImageRef(crop.frame.frame_id, crop.mask.bbox(), crop_data_url(crop.frame, crop.mask))
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT), Message("user", DESCRIBE_PROMPT, ref)),
        max_retries=max_retries, task="describe_crop",
        context={"frame_id": crop.frame.frame_id, "mask_index": crop.mask_index},
    )
    return agent.run(req, _clean_text).parsed


def caption_node(crops: Sequence[Crop], lvlm: Agent, llm: Agent, max_retries: int = 2) -> str:
    """Per-view LVLM descriptions distilled by the LLM into one caption.

    A single view is passed through without the distillation call.
    """
    if not crops:
        raise ValueError("caption_node needs at least one crop")
    views = [describe_crop(c, lvlm, max_retries) for c in crops[:MAX_CAPTION_VIEWS]]
    if len(views) == 1:
        return views[0]
    listing = "\n".join(f"View {i + 1}: {v}" for i, v in enumerate(views))
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT), Message("user", DISTILL_PROMPT.format(views=listing))),
        max_retries=max_retries, task="distill_caption", context={"descriptions": views},
    )
    return llm.run(req, _clean_text).parsed


def _parse_relation(raw: str) -> str:
    text = (raw or "").strip().splitlines()[0] if (raw or "").strip() else ""
    text = text.strip().strip("'\"").rstrip(".").strip().lower()
    if not text:
        raise ParseFailure("empty relation")
    return text


def relation_label(a: NodeSummary, b: NodeSummary, agent: Agent, max_retries: int = 2) -> str:
    prompt = RELATION_PROMPT.format(a_caption=a.caption, a_center=_fmt_point(a.center),
                                    b_caption=b.caption, b_center=_fmt_point(b.center))
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT), Message("user", prompt)),
        max_retries=max_retries, task="relation_label",
        context={"a": {"id": a.id, "center": list(a.center)}, "b": {"id": b.id, "center": list(b.center)}},
    )
    return agent.run(req, _parse_relation).parsed


def summarize_scene(captions: Sequence[str], agent: Agent, max_retries: int = 2) -> str:
    if not captions:
        raise ValueError("scene caption needs at least one node caption")
    listing = "\n".join(f"- {c}" for c in captions)
    req = AgentRequest(
        (Message("system", SYSTEM_PROMPT), Message("user", SCENE_PROMPT.format(captions=listing))),
        max_retries=max_retries, task="scene_caption", context={"captions": list(captions)},
    )
    return agent.run(req, _clean_text).parsed
