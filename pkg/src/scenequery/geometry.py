"""Point clouds, pinhole cameras, 2D masks and axis-aligned 3D boxes.

Camera convention is OpenCV: x right, y down, z forward. ``CameraFrame.pose``
maps camera coordinates to world coordinates. Pixel ``(row, col)`` has its
center at image coordinates ``(u, v) = (col, row)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyProjection, EmptySelection, InvalidCapture

DEFAULT_Z_TOLERANCE = 0.05
BOX_EPSILON = 1e-6
NORMAL_NEIGHBORS = 10


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise InvalidCapture(f"point cloud must be a non-empty (N, 3) array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidCapture("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64)
            if cols.shape != pts.shape:
                raise InvalidCapture("colors must match points in shape")
            object.__setattr__(self, "colors", np.clip(cols, 0.0, 1.0))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise InvalidCapture("normals must match points in shape")
            if not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-6):
                raise InvalidCapture("normals must be unit vectors")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, self.colors, normals)


@dataclass(frozen=True, eq=False)
class CameraFrame:
    frame_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    width: int
    height: int
    depth: Optional[np.ndarray] = None
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise InvalidCapture(f"frame {self.frame_id}: pose rotation is not orthonormal with det +1")
        if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidCapture(f"frame {self.frame_id}: pose bottom row must be 0 0 0 1")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidCapture(f"frame {self.frame_id}: focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCapture(f"frame {self.frame_id}: image size must be positive")
        object.__setattr__(self, "pose", pose)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float32)
            if depth.shape != (self.height, self.width):
                raise InvalidCapture(f"frame {self.frame_id}: depth shape {depth.shape} != image size")
            object.__setattr__(self, "depth", depth)
        if self.color is not None:
            color = np.asarray(self.color, dtype=np.uint8)
            if color.shape != (self.height, self.width, 3):
                raise InvalidCapture(f"frame {self.frame_id}: color shape {color.shape} != image size")
            object.__setattr__(self, "color", color)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        rot = self.pose[:3, :3]
        return (np.asarray(points, dtype=np.float64) - self.pose[:3, 3]) @ rot


@dataclass(frozen=True, eq=False)
class Mask2D:
    frame_id: int
    bitmap: np.ndarray
    label: str = ""
    confidence: float = 1.0

    def __post_init__(self):
        bitmap = np.asarray(self.bitmap, dtype=bool)
        if bitmap.ndim != 2:
            raise InvalidCapture("mask bitmap must be 2D")
        if not bitmap.any():
            raise InvalidCapture(f"mask on frame {self.frame_id} has no set pixel")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidCapture("mask confidence must lie in [0, 1]")
        object.__setattr__(self, "bitmap", bitmap)

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())

    def bbox(self) -> tuple[int, int, int, int]:
        """Inclusive (row0, col0, row1, col1) of the set pixels."""
        rows = np.flatnonzero(self.bitmap.any(axis=1))
        cols = np.flatnonzero(self.bitmap.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


@dataclass(frozen=True)
class Box3D:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box corners must be 3D")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        if any(b - a <= 0 for a, b in zip(lo, hi)):
            raise ValueError("box volume must be positive")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min) + np.asarray(self.max)) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max) - np.asarray(self.min)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def to_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_dict(cls, data: dict) -> "Box3D":
        return cls(tuple(data["min"]), tuple(data["max"]))


# --------------------------------------------------------------------------- projection


def project_to_pixels(
    points: np.ndarray,
    frame: CameraFrame,
    z_tolerance: float = DEFAULT_Z_TOLERANCE,
    use_depth: Optional[bool] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: returns ``(rows, cols, keep)`` for every input point.

    ``keep`` flags points in front of the camera, inside the image, and (when
    depth is used) not occluded. Depth pixels that are zero or non-finite carry
    no evidence and never occlude.
    """
    if z_tolerance <= 0:
        raise ValueError("z_tolerance must be positive")
    if use_depth is None:
        use_depth = frame.depth is not None
    if use_depth and frame.depth is None:
        raise ValueError(f"frame {frame.frame_id} has no depth for occlusion testing")
    cam = frame.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    front = z > 1e-9
    safe_z = np.where(front, z, 1.0)
    u = frame.fx * cam[:, 0] / safe_z + frame.cx
    v = frame.fy * cam[:, 1] / safe_z + frame.cy
    cols = np.floor(u + 0.5).astype(np.int64)
    rows = np.floor(v + 0.5).astype(np.int64)
    keep = front & (cols >= 0) & (cols < frame.width) & (rows >= 0) & (rows < frame.height)
    if use_depth and keep.any():
        idx = np.flatnonzero(keep)
        stored = frame.depth[rows[idx], cols[idx]].astype(np.float64)
        known = np.isfinite(stored) & (stored > 0)
        visible = ~known | (z[idx] <= stored + z_tolerance)
        keep[idx[~visible]] = False
    return rows, cols, keep


def project_points(
    points: np.ndarray,
    frame: CameraFrame,
    z_tolerance: float = DEFAULT_Z_TOLERANCE,
    use_depth: Optional[bool] = None,
) -> Mask2D:
    """Rasterize the visible footprint of ``points`` in ``frame`` (nearest pixel, no splatting)."""
    rows, cols, keep = project_to_pixels(points, frame, z_tolerance, use_depth)
    if not keep.any():
        raise EmptyProjection(f"no point lands inside frame {frame.frame_id}")
    bitmap = np.zeros(frame.shape, dtype=bool)
    bitmap[rows[keep], cols[keep]] = True
    return Mask2D(frame.frame_id, bitmap)


def backproject_mask(mask: Mask2D, frame: CameraFrame) -> np.ndarray:
    """World points for every mask pixel that has a valid depth sample."""
    if frame.depth is None:
        raise ValueError(f"frame {frame.frame_id} has no depth")
    rows, cols = np.nonzero(mask.bitmap)
    z = frame.depth[rows, cols].astype(np.float64)
    ok = np.isfinite(z) & (z > 0)
    rows, cols, z = rows[ok], cols[ok], z[ok]
    cam = np.stack([(cols - frame.cx) / frame.fx * z, (rows - frame.cy) / frame.fy * z, z], axis=1)
    return cam @ frame.pose[:3, :3].T + frame.pose[:3, 3]


def voxel_downsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """One point (the voxel mean) per occupied voxel, ordered by voxel key."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return points.reshape(0, 3)
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose of a camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("viewing direction is parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


# --------------------------------------------------------------------------- overlap measures


def mask_iou(a: Mask2D, b: Mask2D) -> float:
    if a.bitmap.shape != b.bitmap.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.bitmap.shape} vs {b.bitmap.shape}")
    inter = np.count_nonzero(a.bitmap & b.bitmap)
    union = np.count_nonzero(a.bitmap | b.bitmap)
    return inter / union


def box_iou(a: Box3D, b: Box3D) -> float:
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    if inter == 0.0:
        return 0.0
    if a == b:
        return 1.0
    return inter / (a.volume + b.volume - inter)


def center_distance(a: Box3D, b: Box3D) -> float:
    ca, cb = a.center, b.center
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(ca, cb)))


def bounding_box(points: np.ndarray) -> Box3D:
    """Tightest axis-aligned box; zero-extent axes are widened to ``BOX_EPSILON``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptySelection("cannot bound an empty point selection")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    flat = (hi - lo) < BOX_EPSILON
    mid = (lo + hi) / 2.0
    lo = np.where(flat, mid - BOX_EPSILON / 2.0, lo)
    hi = np.where(flat, mid + BOX_EPSILON / 2.0, hi)
    return Box3D(tuple(lo), tuple(hi))


# --------------------------------------------------------------------------- normals


def estimate_normals(
    points: np.ndarray,
    k: int = NORMAL_NEIGHBORS,
    viewpoint: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Plane-fit normals from the ``k`` nearest neighbours, oriented toward ``viewpoint``."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = max(3, min(k, n))
    _, nbr = cKDTree(points).query(points, k=k)
    nbr = np.asarray(nbr).reshape(n, k)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if viewpoint is not None:
        flip = np.einsum("ni,ni->n", normals, np.asarray(viewpoint) - points) < 0
        normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)
