"""Text/image embedding providers and semantic-aligned feature fusion."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import DimensionMismatch, ParseFailure, ZeroVector
from .geometry import CameraFrame, Mask2D

DEFAULT_MOCK_DIMENSION = 64


@dataclass(frozen=True, eq=False)
class Feature:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature has non-finite entries")
        if self.normalized and abs(np.linalg.norm(vals) - 1.0) > 1e-6:
            raise ValueError("feature flagged normalized but norm is not 1")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def unit(cls, values: Sequence[float]) -> "Feature":
        vals = np.asarray(values, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(vals)
        if norm == 0.0:
            raise ZeroVector("cannot normalize the zero vector")
        return cls(vals / norm, True)

    @property
    def dimension(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Feature) and self.normalized == other.normalized
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash(self.values.tobytes())


def _unit_rows(features: Sequence[Feature]) -> np.ndarray:
    if not features:
        return np.zeros((0, 0))
    dims = {f.dimension for f in features}
    if len(dims) != 1:
        raise DimensionMismatch(f"feature dimensions differ: {sorted(dims)}")
    rows = np.stack([f.values for f in features])
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector("cosine of a zero vector")
    return rows / norms[:, None]


def cosine_matrix(features: Sequence[Feature], others: Optional[Sequence[Feature]] = None) -> np.ndarray:
    """Pairwise cosine similarities; the single similarity routine used across the package."""
    a = _unit_rows(features)
    b = a if others is None else _unit_rows(others)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(features), len(features if others is None else others)))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(a @ b.T, -1.0, 1.0)


def cosine(a: Feature, b: Feature) -> float:
    return float(cosine_matrix([a], [b])[0, 0])


def fuse_features(visual: Feature, label: Feature) -> Feature:
    """Mean-pool two unit features and re-normalize. Commutative by construction."""
    if visual.dimension != label.dimension:
        raise DimensionMismatch(f"feature dimensions differ: {visual.dimension} vs {label.dimension}")
    # a + b is commutative in IEEE arithmetic, so the result is order independent bit-for-bit
    mean = (visual.values + label.values) / 2.0
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ZeroVector("fused feature is the zero vector (antipodal inputs)")
    return Feature(mean / norm, True)


def mean_feature(features: Sequence[Feature]) -> Feature:
    stacked = np.stack([f.values for f in features])
    return Feature.unit(stacked.mean(axis=0))


# --------------------------------------------------------------------------- providers


@runtime_checkable
class EmbeddingProvider(Protocol):
    def embed_text(self, text: str) -> Feature: ...

    def embed_image_crop(self, frame: CameraFrame, mask: Mask2D) -> Feature: ...

    def dimension(self) -> int: ...


def mock_embed(text: str, dimension: int = DEFAULT_MOCK_DIMENSION, seed: int = 0) -> Feature:
    if dimension < 2:
        raise ValueError("dimension must be at least 2")
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return Feature.unit(rng.standard_normal(dimension))


_PROMPT_PREFIXES = ("an image of ", "a photo of ", "a picture of ", "a ", "an ", "the ")


def canonical_text(text: str) -> str:
    """Lower-case, collapse whitespace and drop prompt templates / leading articles."""
    out = re.sub(r"\s+", " ", text.strip().lower())
    changed = True
    while changed:
        changed = False
        for prefix in _PROMPT_PREFIXES:
            if out.startswith(prefix) and len(out) > len(prefix):
                out = out[len(prefix):]
                changed = True
    return out


class MockEmbeddingProvider:
    """Deterministic hash-seeded embeddings.

    The text encoder ignores prompt templates ("an image of desk" == "desk"),
    and the image encoder embeds the mask's category text, so views of the
    same category agree exactly.
    """

    def __init__(self, dimension: int = DEFAULT_MOCK_DIMENSION, seed: int = 0):
        self._dimension = dimension
        self.seed = seed
        self._cache: dict[str, Feature] = {}
        self._lock = threading.Lock()

    def dimension(self) -> int:
        return self._dimension

    def embed_text(self, text: str) -> Feature:
        key = canonical_text(text)
        with self._lock:
            feat = self._cache.get(key)
            if feat is None:
                feat = self._cache[key] = mock_embed(key, self._dimension, self.seed)
        return feat

    def embed_image_crop(self, frame: CameraFrame, mask: Mask2D) -> Feature:
        return self.embed_text(mask.label)


class EmbeddingCache:
    """On-disk cache: one JSON file per key holding ``{input_hash, dimension, values}``."""

    def __init__(self, directory: os.PathLike | str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(*parts: str) -> str:
        return hashlib.sha256("\x00".join(parts).encode("utf-8")).hexdigest()

    def get(self, key: str) -> Optional[Feature]:
        path = self.directory / f"{key}.json"
        if not path.exists():
            return None
        doc = json.loads(path.read_text())
        return Feature(np.asarray(doc["values"], dtype=np.float64))

    def put(self, key: str, feature: Feature) -> None:
        doc = {"input_hash": key, "dimension": feature.dimension, "values": feature.values.tolist()}
        path = self.directory / f"{key}.json"
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(doc))
            os.replace(tmp, path)


def crop_data_url(frame: CameraFrame, mask: Mask2D, expand: float = 0.10) -> Optional[str]:
    """PNG data URL of the mask's bounding rectangle grown by ``expand``; None without color."""
    if frame.color is None:
        return None
    from PIL import Image

    r0, c0, r1, c1 = mask.bbox()
    dr = int(round((r1 - r0 + 1) * expand / 2.0))
    dc = int(round((c1 - c0 + 1) * expand / 2.0))
    r0, r1 = max(0, r0 - dr), min(frame.height - 1, r1 + dr)
    c0, c1 = max(0, c0 - dc), min(frame.width - 1, c1 + dc)
    buf = io.BytesIO()
    Image.fromarray(frame.color[r0:r1 + 1, c0:c1 + 1]).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


class HttpEmbeddingProvider:
    """Adapter over an OpenAI-compatible ``/embeddings`` endpoint with a disk cache."""

    def __init__(self, endpoint, cache_dir: os.PathLike | str, dimension: int, model: Optional[str] = None):
        self.endpoint = endpoint
        self.model = model or endpoint.model
        self.cache = EmbeddingCache(cache_dir)
        self._dimension = dimension

    def dimension(self) -> int:
        return self._dimension

    def _embed(self, kind: str, payload: str) -> Feature:
        from .agents.http import post_json

        key = self.cache.key(kind, self.model, payload)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        body, _ = post_json(self.endpoint, "/embeddings", {"model": self.model, "input": payload})
        try:
            values = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ParseFailure(f"malformed embeddings response: {exc}") from exc
        feat = Feature.unit(values)
        if feat.dimension != self._dimension:
            raise DimensionMismatch(f"provider returned dimension {feat.dimension}, expected {self._dimension}")
        self.cache.put(key, feat)
        return feat

    def embed_text(self, text: str) -> Feature:
        return self._embed("text", text)

    def embed_image_crop(self, frame: CameraFrame, mask: Mask2D) -> Feature:
        url = crop_data_url(frame, mask)
        if url is None:
            return self.embed_text(mask.label)
        return self._embed("image", url)
