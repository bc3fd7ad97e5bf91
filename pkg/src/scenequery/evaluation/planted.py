"""Synthetic desk-scale scenes with planted ground truth.

Objects are solid axis-aligned cuboids in a 6 x 6 x 3 m room. Frames are
ray-cast exactly (depth, instance masks, flat-shaded color), and the point
cloud keeps only surface samples that some frame actually observes, the way
a fused RGB-D scan would.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..capture import SceneCapture, load_manifest, save_manifest
from ..errors import PlacementFailure
from ..geometry import (DEFAULT_Z_TOLERANCE, Box3D, CameraFrame, Mask2D, PointCloud, bounding_box, look_at,
                        project_to_pixels)

ROOM = (6.0, 6.0, 3.0)
FLOOR_MARGIN = 0.9
FLOOR_GAP = 0.25
NEAR_DISTANCE = 1.0
LEFT_RIGHT_MARGIN = 0.2
ON_TOLERANCE = 0.02
MIN_MASK_PIXELS = 25
MIN_OBJECT_POINTS = 200
SHARED_SURFACE = 0.25
SURFACE_DENSITY = 2500.0
IMAGE_SIZE = (240, 180)
FOCAL = 190.0
RELATIONS = ("on", "near", "left of", "right of")

# category -> (x range, y range, z range) in meters
FLOOR_CATEGORIES = {
    "desk": ((1.0, 1.6), (0.55, 0.8), (0.70, 0.78)),
    "table": ((0.8, 1.2), (0.8, 1.2), (0.70, 0.76)),
    "cabinet": ((0.45, 0.9), (0.4, 0.6), (0.6, 1.0)),
    "chair": ((0.45, 0.6), (0.45, 0.6), (0.45, 0.9)),
    "sofa": ((1.4, 2.0), (0.7, 0.9), (0.45, 0.8)),
    "bin": ((0.3, 0.4), (0.3, 0.4), (0.35, 0.5)),
}
SMALL_CATEGORIES = {
    "lamp": ((0.2, 0.3), (0.2, 0.3), (0.3, 0.5)),
    "monitor": ((0.4, 0.6), (0.2, 0.3), (0.3, 0.45)),
    "box": ((0.25, 0.4), (0.25, 0.4), (0.15, 0.3)),
    "plant": ((0.25, 0.35), (0.25, 0.35), (0.3, 0.6)),
}
PALETTE = {
    "red": (200, 40, 40), "green": (40, 160, 60), "blue": (40, 70, 200), "yellow": (220, 200, 40),
    "orange": (230, 130, 30), "purple": (130, 50, 160), "white": (245, 245, 245), "black": (25, 25, 25),
    "brown": (120, 80, 40), "cyan": (40, 190, 200), "pink": (230, 120, 170), "olive": (110, 120, 30),
}
BACKGROUND_RGB = (180, 180, 180)

_QUERY_RE = re.compile(r"^\s*the (?P<cat>.+?) (?:that is )?(?P<rel>on|near|left of|right of) the (?P<cat2>.+?)\s*$",
                       re.IGNORECASE)


@dataclass(frozen=True, eq=False)
class PlantedObject:
    index: int
    category: str
    color: str
    solid: Box3D
    box: Box3D
    point_indices: np.ndarray

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.category}"


@dataclass(frozen=True)
class PlantedQuery:
    query_id: str
    text: str
    gt_target: int


@dataclass(eq=False)
class PlantedScene:
    seed: int
    capture: SceneCapture
    objects: list[PlantedObject]
    relations: list[tuple[int, int, str]]
    queries: list[PlantedQuery]
    mask_owner: dict[int, list[int]] = field(default_factory=dict)

    # ------------------------------------------------------------------ relation rules
    def holds(self, rel: str, a: int, b: int) -> bool:
        if a == b:
            return False
        sa, sb = self.objects[a].solid, self.objects[b].solid
        if rel == "on":
            return _is_on(sa, sb)
        if rel == "near":
            return (np.linalg.norm(sa.center - sb.center) < NEAR_DISTANCE
                    and not _is_on(sa, sb) and not _is_on(sb, sa))
        if rel in ("left of", "right of"):
            xa, xb = self._camera_x(sa), self._camera_x(sb)
            return xb - xa > LEFT_RIGHT_MARGIN if rel == "left of" else xa - xb > LEFT_RIGHT_MARGIN
        raise ValueError(f"unknown relation {rel!r}")

    def _camera_x(self, solid: Box3D) -> float:
        return float(self.capture.frames[0].world_to_camera(solid.center[None, :])[0, 0])

    def relation_between(self, a: int, b: int) -> str:
        for rel in RELATIONS:
            if self.holds(rel, a, b):
                return rel
        return "far from"

    def satisfiers(self, text: str) -> set[int]:
        """Objects matching a relational query, by exhaustive check."""
        parsed = parse_query(text)
        if parsed is None:
            return set()
        cat, rel, cat2 = parsed
        return {x.index for x in self.objects if x.category == cat
                and any(y.category == cat2 and self.holds(rel, x.index, y.index) for y in self.objects)}

    def nearest_object(self, center: Sequence[float]) -> int:
        c = np.asarray(center, dtype=np.float64)
        return int(np.argmin([np.linalg.norm(o.box.center - c) for o in self.objects]))

    @property
    def categories(self) -> list[str]:
        return sorted({o.category for o in self.objects})

    def point_labels(self, background: str = "background") -> np.ndarray:
        labels = np.full(len(self.capture.cloud), background, dtype=object)
        for o in self.objects:
            labels[o.point_indices] = o.category
        return labels

    # ------------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "objects": [{"index": o.index, "category": o.category, "color": o.color, "caption": o.caption,
                         "solid": o.solid.to_dict(), "box": o.box.to_dict(),
                         "point_indices": o.point_indices.tolist()} for o in self.objects],
            "relations": [{"a": a, "b": b, "relation": r} for a, b, r in self.relations],
            "queries": [{"query_id": q.query_id, "text": q.text, "gt_target": q.gt_target} for q in self.queries],
            "mask_owner": {str(k): v for k, v in sorted(self.mask_owner.items())},
        }

    def save(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = save_manifest(self.capture, out)
        (out / "planted.json").write_text(json.dumps(self.to_dict(), indent=1))
        with open(out / "queries.jsonl", "w") as fh:
            for q in self.queries:
                box = self.objects[q.gt_target].box
                fh.write(json.dumps({"query_id": q.query_id, "text": q.text, "gt_target_id": q.gt_target,
                                     "gt_box": box.to_dict()}) + "\n")
        return manifest

    @classmethod
    def load(cls, directory: Union[str, Path], capture: Optional[SceneCapture] = None) -> "PlantedScene":
        directory = Path(directory)
        doc = json.loads((directory / "planted.json").read_text())
        if capture is None:
            capture = load_manifest(directory / "manifest.json")
        objects = [PlantedObject(o["index"], o["category"], o["color"], Box3D.from_dict(o["solid"]),
                                 Box3D.from_dict(o["box"]), np.asarray(o["point_indices"], dtype=np.int64))
                   for o in doc["objects"]]
        return cls(doc["seed"], capture, objects,
                   [(r["a"], r["b"], r["relation"]) for r in doc["relations"]],
                   [PlantedQuery(q["query_id"], q["text"], q["gt_target"]) for q in doc["queries"]],
                   {int(k): v for k, v in doc["mask_owner"].items()})


def parse_query(text: str) -> Optional[tuple[str, str, str]]:
    m = _QUERY_RE.match(text)
    if m is None:
        return None
    return m.group("cat").lower(), m.group("rel").lower(), m.group("cat2").lower()


def _is_on(top: Box3D, base: Box3D) -> bool:
    if abs(top.min[2] - base.max[2]) > ON_TOLERANCE:
        return False
    ox = min(top.max[0], base.max[0]) - max(top.min[0], base.min[0])
    oy = min(top.max[1], base.max[1]) - max(top.min[1], base.min[1])
    return ox > 0 and oy > 0


# --------------------------------------------------------------------------- generation


def _sample_size(rng: np.random.Generator, ranges) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in ranges])


def _place(rng: np.random.Generator, count: int, max_attempts: int) -> list[tuple[str, Box3D]]:
    placed: list[tuple[str, Box3D, bool]] = []  # (category, solid, is_floor)
    hosts_used: set[int] = set()
    floor_names, small_names = sorted(FLOOR_CATEGORIES), sorted(SMALL_CATEGORIES)
    for i in range(count):
        stack = i > 0 and rng.random() < 0.35
        cat = str(rng.choice(small_names if stack or rng.random() < 0.3 else floor_names))
        ranges = SMALL_CATEGORIES.get(cat) or FLOOR_CATEGORIES[cat]
        for _ in range(max_attempts):
            size = _sample_size(rng, ranges)
            if stack and cat in SMALL_CATEGORIES:
                hosts = [j for j, (_, s, floor) in enumerate(placed)
                         if floor and j not in hosts_used and np.all(s.extent[:2] > size[:2] + 0.1)]
                if hosts:
                    j = int(rng.choice(hosts))
                    host = placed[j][1]
                    x = rng.uniform(host.min[0] + 0.05, host.max[0] - 0.05 - size[0])
                    y = rng.uniform(host.min[1] + 0.05, host.max[1] - 0.05 - size[1])
                    lo = np.array([x, y, host.max[2]])
                    placed.append((cat, Box3D(tuple(lo), tuple(lo + size)), False))
                    hosts_used.add(j)
                    break
                stack = False
            x = rng.uniform(FLOOR_MARGIN, ROOM[0] - FLOOR_MARGIN - size[0])
            y = rng.uniform(FLOOR_MARGIN, ROOM[1] - FLOOR_MARGIN - size[1])
            lo = np.array([x, y, 0.0])
            solid = Box3D(tuple(lo), tuple(lo + size))
            clear = all(
                s.min[0] - FLOOR_GAP >= solid.max[0] or solid.min[0] - FLOOR_GAP >= s.max[0]
                or s.min[1] - FLOOR_GAP >= solid.max[1] or solid.min[1] - FLOOR_GAP >= s.max[1]
                for _, s, floor in placed if floor
            ) and all(solid.max[2] <= s.min[2] - 0.05 or not _overlap_xy(s, solid) for _, s, floor in placed if not floor)
            if clear:
                placed.append((cat, solid, True))
                break
        else:
            raise PlacementFailure(f"could not place object {i} ({cat}) after {max_attempts} attempts")
    return [(c, s) for c, s, _ in placed]


def _overlap_xy(a: Box3D, b: Box3D) -> bool:
    return (min(a.max[0], b.max[0]) > max(a.min[0], b.min[0])
            and min(a.max[1], b.max[1]) > max(a.min[1], b.min[1]))


def _cameras(frame_count: int) -> list[CameraFrame]:
    w, h = IMAGE_SIZE
    center = np.array([ROOM[0] / 2, ROOM[1] / 2])
    frames = []
    for k in range(frame_count):
        ang = np.deg2rad(45.0 + 360.0 * k / frame_count)
        eye = (center[0] + 2.9 * np.cos(ang), center[1] + 2.9 * np.sin(ang), 2.6)
        pose = look_at(eye, (center[0], center[1], 0.3))
        frames.append(CameraFrame(k, FOCAL, FOCAL, (w - 1) / 2.0, (h - 1) / 2.0, pose, w, h))
    return frames


def _raycast(frame: CameraFrame, solids: Sequence[Box3D]) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel camera depth and object index (-1 for background)."""
    rows, cols = np.mgrid[0:frame.height, 0:frame.width]
    d_cam = np.stack([(cols - frame.cx) / frame.fx, (rows - frame.cy) / frame.fy, np.ones_like(cols, float)], -1)
    d = d_cam.reshape(-1, 3) @ frame.pose[:3, :3].T
    o = frame.pose[:3, 3]
    best = np.full(len(d), np.inf)
    owner = np.full(len(d), -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for idx, s in enumerate(solids):
            t1 = (np.asarray(s.min) - o) * inv
            t2 = (np.asarray(s.max) - o) * inv
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tnear <= tfar) & (tnear > 0) & (tnear < best)
            best[hit] = tnear[hit]
            owner[hit] = idx
    depth = np.where(np.isfinite(best), best, 0.0).reshape(frame.height, frame.width)
    return depth.astype(np.float32), owner.reshape(frame.height, frame.width)


def _surface_samples(rng: np.random.Generator, solid: Box3D) -> np.ndarray:
    lo, hi = np.asarray(solid.min), np.asarray(solid.max)
    ext = hi - lo
    faces = []
    # top face, then the four sides; the bottom rests on a support and is never observed
    for axis, side in [(2, 1), (0, 0), (0, 1), (1, 0), (1, 1)]:
        others = [a for a in range(3) if a != axis]
        area = ext[others[0]] * ext[others[1]]
        n = max(8, int(np.ceil(area * SURFACE_DENSITY)))
        pts = lo + rng.random((n, 3)) * ext
        pts[:, axis] = hi[axis] if side else lo[axis]
        faces.append(pts)
    return np.concatenate(faces)


def generate_planted_scene(seed: int = 7, object_count: int = 4, frame_count: int = 4, query_count: int = 20,
                           max_attempts: int = 200, max_layouts: int = 30) -> PlantedScene:
    """Deterministic synthetic scene with relational queries that each have exactly one answer."""
    if object_count < 2 or frame_count < 2:
        raise ValueError("need at least 2 objects and 2 frames")
    rng = np.random.default_rng(seed)
    last_reason = ""
    for _ in range(max_layouts):
        layout = _place(rng, object_count, max_attempts)
        scene = _build(rng, seed, layout, frame_count, query_count)
        if isinstance(scene, PlantedScene):
            return scene
        last_reason = scene
    raise PlacementFailure(f"no valid layout after {max_layouts} tries: {last_reason}")


def _build(rng, seed, layout, frame_count, query_count):
    solids = [s for _, s in layout]
    colors = [str(c) for c in rng.choice(sorted(PALETTE), size=len(layout), replace=False)]
    frames = _cameras(frame_count)
    rendered = [_raycast(f, solids) for f in frames]

    frames_out = []
    for f, (depth, owner) in zip(frames, rendered):
        color = np.empty((f.height, f.width, 3), dtype=np.uint8)
        color[:] = BACKGROUND_RGB
        for idx in range(len(solids)):
            color[owner == idx] = PALETTE[colors[idx]]
        frames_out.append(CameraFrame(f.frame_id, f.fx, f.fy, f.cx, f.cy, f.pose, f.width, f.height, depth, color))

    # A view is emitted as a mask only if it is large enough and, after the
    # object's first view, shares surface with the views already emitted, so
    # sequential multi-view association can chain the detections together.
    masks = {f.frame_id: [] for f in frames_out}
    owners = {f.frame_id: [] for f in frames_out}
    all_pts, all_cols, all_owner = [], [], []
    for idx, ((cat, s), samples) in enumerate(zip(layout, (_surface_samples(rng, s) for s in solids))):
        seen = np.zeros(len(samples), dtype=bool)
        views = 0
        for f, (_, owner) in zip(frames_out, rendered):
            bitmap = owner == idx
            if bitmap.sum() < MIN_MASK_PIXELS:
                continue
            r, c, keep = project_to_pixels(samples, f, DEFAULT_Z_TOLERANCE)
            hit = np.zeros(len(samples), dtype=bool)
            hit[keep] = owner[r[keep], c[keep]] == idx
            if views and np.count_nonzero(hit & seen) < SHARED_SURFACE * np.count_nonzero(hit):
                continue
            masks[f.frame_id].append(Mask2D(f.frame_id, bitmap, cat, 1.0))
            owners[f.frame_id].append(idx)
            seen |= hit
            views += 1
        if views < 2:
            return f"object {idx} has {views} usable view(s)"
        pts = samples[seen]
        if len(pts) < MIN_OBJECT_POINTS:
            return f"object {idx} has only {len(pts)} observed points"
        all_pts.append(pts)
        all_cols.append(np.tile(np.asarray(PALETTE[colors[idx]]) / 255.0, (len(pts), 1)))
        all_owner.append(np.full(len(pts), idx))
    for fid in owners:
        order = np.argsort(owners[fid], kind="stable")
        owners[fid] = [owners[fid][i] for i in order]
        masks[fid] = [masks[fid][i] for i in order]
    points = np.concatenate(all_pts)
    owner_of_point = np.concatenate(all_owner)
    cloud = PointCloud(points, np.concatenate(all_cols))
    capture = SceneCapture(cloud, frames_out, masks)

    objects = []
    for idx, (cat, s) in enumerate(layout):
        sel = np.flatnonzero(owner_of_point == idx)
        objects.append(PlantedObject(idx, cat, colors[idx], s, bounding_box(points[sel]), sel))
    scene = PlantedScene(seed, capture, objects, [], [], owners)
    scene.relations = [(a.index, b.index, rel) for a in objects for b in objects for rel in RELATIONS
                       if scene.holds(rel, a.index, b.index)]
    scene.queries = _make_queries(rng, scene, query_count)
    if not scene.queries:
        return "no relational query has a unique answer"
    return scene


def _make_queries(rng, scene: PlantedScene, count: int) -> list[PlantedQuery]:
    texts: dict[str, int] = {}
    for a, b, rel in scene.relations:
        ca, cb = scene.objects[a].category, scene.objects[b].category
        for template in ("the {a} {rel} the {b}", "the {a} that is {rel} the {b}"):
            text = template.format(a=ca, rel=rel, b=cb)
            if text not in texts and scene.satisfiers(text) == {a}:
                texts[text] = a
    if not texts:
        return []
    ordered = sorted(texts)
    ordered = [ordered[i] for i in rng.permutation(len(ordered))]
    return [PlantedQuery(f"q{i:03d}", ordered[i % len(ordered)], texts[ordered[i % len(ordered)]])
            for i in range(count)]
