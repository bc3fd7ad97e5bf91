"""Model-free backend answering every prompt from a planted scene's ground truth.

Graph nodes are matched to planted objects by nearest box center; answers are
then read off the planted record and the same geometric relation rules the
generator used.
"""

from __future__ import annotations

import json
from collections import Counter
from typing import Sequence

import numpy as np

from ..errors import ProviderUnavailable
from ..evaluation.planted import PlantedScene, parse_query
from .core import AgentRequest


class OracleProvider:
    name = "oracle"

    def __init__(self, scene: PlantedScene):
        self.scene = scene

    def complete(self, request: AgentRequest) -> str:
        ctx = request.context or {}
        handler = getattr(self, "_" + request.task, None)
        if handler is None:
            raise ProviderUnavailable(f"oracle cannot answer task {request.task!r}")
        return handler(ctx)

    # ------------------------------------------------------------------ graph construction
    def _list_objects(self, ctx) -> str:
        owners = self.scene.mask_owner.get(int(ctx["frame_id"]), [])
        cats = sorted({self.scene.objects[i].category for i in owners})
        return ", ".join(cats)

    def _describe_crop(self, ctx) -> str:
        owner = self.scene.mask_owner[int(ctx["frame_id"])][int(ctx["mask_index"])]
        return self.scene.objects[owner].caption

    def _distill_caption(self, ctx) -> str:
        counts = Counter(ctx["descriptions"])
        return max(ctx["descriptions"], key=lambda d: counts[d])

    def _relation_label(self, ctx) -> str:
        a = self.scene.nearest_object(ctx["a"]["center"])
        b = self.scene.nearest_object(ctx["b"]["center"])
        return self.scene.relation_between(a, b)

    def _scene_caption(self, ctx) -> str:
        return "; ".join(ctx["captions"])

    # ------------------------------------------------------------------ reasoning
    def _node_objects(self, nodes: Sequence[dict]) -> dict[int, int]:
        return {int(n["id"]): self.scene.nearest_object(n["center"]) for n in nodes}

    def _category(self, obj: int) -> str:
        return self.scene.objects[obj].category

    def _stage1(self, ctx) -> str:
        mapping = self._node_objects(ctx["nodes"])
        parsed = parse_query(ctx["query"])
        if parsed is None:
            words = set(ctx["query"].lower().split())
            cands = sorted(n for n, o in mapping.items() if self._category(o) in words) or sorted(mapping)
            return json.dumps({"candidates": cands, "relations": []})
        cat, rel, cat2 = parsed
        subjects = sorted(n for n, o in mapping.items() if self._category(o) == cat)
        objects = sorted(n for n, o in mapping.items() if self._category(o) == cat2)
        relations = [{"subject": s, "relation": rel, "object": o} for s in subjects for o in objects if s != o]
        return json.dumps({"candidates": sorted(set(subjects) | set(objects)), "relations": relations})

    def _stage2(self, ctx) -> str:
        cands = ctx["candidates"]
        mapping = self._node_objects(cands)
        centers = {int(c["id"]): np.asarray(c["center"], dtype=np.float64) for c in cands}
        parsed = parse_query(ctx["query"])
        if parsed is None:
            target = min(mapping)
            return json.dumps({"target": target, "rationale": "query not relational; first candidate"})
        cat, rel, cat2 = parsed
        subjects = [n for n, o in sorted(mapping.items()) if self._category(o) == cat] or sorted(mapping)
        anchors = [n for n, o in sorted(mapping.items()) if self._category(o) == cat2]
        ok = [s for s in subjects if any(a != s and self.scene.holds(rel, mapping[s], mapping[a]) for a in anchors)]

        def anchor_distance(s: int) -> float:
            ds = [np.linalg.norm(centers[s] - centers[a]) for a in anchors if a != s]
            return min(ds) if ds else np.inf

        target = min(ok or subjects, key=lambda s: (anchor_distance(s), s))
        why = f"{len(ok)} candidate(s) satisfy '{rel}' w.r.t. a {cat2}; picked node {target}"
        return json.dumps({"target": int(target), "rationale": why})
