"""Scene capture container and the on-disk manifest format.

A manifest is a JSON document::

    {
      "point_cloud": "cloud.ply",
      "frames": [
        {"frame_id": 0,
         "intrinsics": {"fx": ..., "fy": ..., "cx": ..., "cy": ...},
         "pose": [16 numbers, row-major camera-to-world],
         "width": W, "height": H,
         "depth_file": "depth/000.npy",      # optional, float32 (H, W) meters
         "color_file": "color/000.png",      # optional, RGB
         "masks": [{"bitmap_file": "masks/000_00.png", "label": "desk", "confidence": 1.0}]}
      ]
    }

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .errors import InvalidCapture
from .geometry import CameraFrame, Mask2D, PointCloud

PathLike = Union[str, os.PathLike]


@dataclass(eq=False)
class SceneCapture:
    cloud: PointCloud
    frames: list[CameraFrame]
    masks: dict[int, list[Mask2D]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise InvalidCapture("duplicate frame ids in capture")
        shapes = {f.frame_id: f.shape for f in self.frames}
        for fid, masks in self.masks.items():
            if fid not in shapes:
                raise InvalidCapture(f"masks reference unknown frame {fid}")
            for m in masks:
                if m.frame_id != fid:
                    raise InvalidCapture(f"mask frame id {m.frame_id} filed under frame {fid}")
                if m.bitmap.shape != shapes[fid]:
                    raise InvalidCapture(f"mask on frame {fid} has shape {m.bitmap.shape}, expected {shapes[fid]}")
        for f in self.frames:
            self.masks.setdefault(f.frame_id, [])

    def frame(self, frame_id: int) -> CameraFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path: PathLike, cloud: PointCloud) -> None:
    """Binary little-endian PLY with x,y,z float32 and optional uchar red,green,blue."""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(len(cloud), dtype=fields)
    data["x"], data["y"], data["z"] = cloud.points.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        rgb = np.round(cloud.colors * 255.0).astype(np.uint8)
        data["red"], data["green"], data["blue"] = rgb.T
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path: PathLike) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise InvalidCapture(f"{path}: not a PLY file")
        count, props, in_vertex, fmt = None, [], False, None
        while True:
            line = fh.readline()
            if not line:
                raise InvalidCapture(f"{path}: truncated PLY header")
            tokens = line.decode("ascii").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    count = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise InvalidCapture(f"{path}: list properties unsupported on vertices")
                props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise InvalidCapture(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
        if count is None:
            raise InvalidCapture(f"{path}: no vertex element")
        data = np.frombuffer(fh.read(np.dtype(props).itemsize * count), dtype=props, count=count)
    names = {p[0] for p in props}
    if not {"x", "y", "z"} <= names:
        raise InvalidCapture(f"{path}: vertex element lacks x/y/z")
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float64) / 255.0
    return PointCloud(points, colors)


# --------------------------------------------------------------------------- manifest


def load_manifest(path: PathLike) -> SceneCapture:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidCapture(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    try:
        cloud = read_ply(root / doc["point_cloud"])
        frames, masks = [], {}
        for rec in doc["frames"]:
            fid = int(rec["frame_id"])
            intr = rec["intrinsics"]
            depth = color = None
            if rec.get("depth_file"):
                depth = np.load(root / rec["depth_file"]).astype(np.float32)
            if rec.get("color_file"):
                color = np.asarray(Image.open(root / rec["color_file"]).convert("RGB"))
            pose = np.asarray(rec["pose"], dtype=np.float64)
            if pose.size != 16:
                raise InvalidCapture(f"frame {fid}: pose needs 16 numbers")
            frames.append(CameraFrame(
                fid, float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                pose.reshape(4, 4), int(rec["width"]), int(rec["height"]), depth, color,
            ))
            masks[fid] = [
                Mask2D(fid, np.asarray(Image.open(root / m["bitmap_file"]).convert("L")) > 0,
                       str(m["label"]), float(m.get("confidence", 1.0)))
                for m in rec.get("masks", [])
            ]
    except InvalidCapture:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise InvalidCapture(f"invalid manifest {path}: {exc}") from exc
    return SceneCapture(cloud, frames, masks)


def save_manifest(capture: SceneCapture, out_dir: PathLike, name: str = "manifest.json") -> Path:
    """Write the capture as manifest + PLY + PNG masks + ``.npy`` depth rasters."""
    out = Path(out_dir)
    for sub in ("depth", "color", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_ply(out / "cloud.ply", capture.cloud)
    frames = []
    for f in capture.frames:
        rec = {
            "frame_id": f.frame_id,
            "intrinsics": {"fx": f.fx, "fy": f.fy, "cx": f.cx, "cy": f.cy},
            "pose": [float(v) for v in f.pose.reshape(-1)],
            "width": f.width,
            "height": f.height,
        }
        if f.depth is not None:
            rec["depth_file"] = f"depth/{f.frame_id:03d}.npy"
            np.save(out / rec["depth_file"], f.depth.astype(np.float32))
        if f.color is not None:
            rec["color_file"] = f"color/{f.frame_id:03d}.png"
            Image.fromarray(f.color).save(out / rec["color_file"])
        rec["masks"] = []
        for i, m in enumerate(capture.masks.get(f.frame_id, [])):
            fname = f"masks/{f.frame_id:03d}_{i:02d}.png"
            Image.fromarray(m.bitmap.astype(np.uint8) * 255).save(out / fname)
            rec["masks"].append({"bitmap_file": fname, "label": m.label, "confidence": m.confidence})
        frames.append(rec)
    manifest = out / name
    manifest.write_text(json.dumps({"point_cloud": "cloud.ply", "frames": frames}, indent=1))
    return manifest
