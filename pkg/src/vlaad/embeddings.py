"""Encoder abstraction producing video-snippet and caption embeddings.

Two encoder families satisfy the same small interface:

* ``StubEncoder`` is a pure function of (input, seed): a fixed random
  projection for video windows and a hash-bucket bag-of-tokens projection
  for captions, both unit-normalized.  It keeps the entire pipeline
  runnable and byte-reproducible on a laptop with no model weights.
* ``CachedEncoder`` serves embeddings that a real pretrained backbone wrote
  offline into the binary cache file (see ``write_embedding_cache``).
  External backbones never link into the math core; the cache file is the
  only seam.  Cached vectors are served as-is, without renormalization.

The ``VLAAD_ENCODER`` environment variable ("stub" or "cache") selects the
family at the CLI level.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Protocol, Tuple

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionMismatchError,
    EmptyInputError,
    ValidationError,
)

DEFAULT_DIM = 768
DEFAULT_TEXT_BUCKETS = 512

CACHE_MAGIC = b"VLEC"
CACHE_VERSION = 1

# Seed-stream tags so the video and text projections never collide even
# for identical (seed, shape) pairs.
_VIDEO_STREAM = 101
_TEXT_STREAM = 202


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension float32 vector from a video or text encoder."""

    values: np.ndarray
    source: str  # "video" | "text"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 1:
            raise ValidationError(f"embedding must be 1-D, got shape {vals.shape}")
        if self.source not in ("video", "text"):
            raise ValidationError(f"unknown embedding source {self.source!r}")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("embedding has non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class FrameWindow:
    """Ordered per-frame feature rows for one snippet.

    ``key`` is the lookup id used by cache-backed encoders; the stub
    encoder ignores it.
    """

    frames: np.ndarray  # (K, feat)
    timestamps: np.ndarray  # (K,) seconds, strictly increasing
    key: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise EmptyInputError("frame window must contain at least one frame")
        if self.timestamps.shape != (self.frames.shape[0],):
            raise ValidationError("one timestamp per frame required")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.frames.shape[0])


class EncoderHandle(Protocol):
    """Anything that maps windows and captions to D-dim embeddings."""

    dim: int

    def encode_window(self, window: FrameWindow) -> Embedding: ...

    def encode_text(self, caption: str) -> Embedding: ...

    def state_hash(self) -> str: ...


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm < 1e-12:
        raise DegenerateInputError(f"{what} has (near-)zero norm; refusing to emit NaN")
    return (vec / norm).astype(np.float32)


class StubEncoder:
    """Deterministic desk-scale encoder pair.

    Video windows are mean-pooled over frames, passed through a fixed seeded
    dense projection to ``dim``, and unit-normalized.  Captions are trimmed,
    lower-cased, tokenized on whitespace, hashed into ``text_buckets`` count
    buckets (stable sha256 hashing, not the salted builtin), projected with a
    second seeded matrix, and unit-normalized.

    Projections are pure functions of (seed, shape); they are materialized
    lazily and cached.  Instances are immutable after construction and safe
    to call concurrently.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0,
                 text_buckets: int = DEFAULT_TEXT_BUCKETS):
        if dim < 1:
            raise ValidationError("encoder dim must be >= 1")
        self.dim = int(dim)
        self.seed = int(seed)
        self.text_buckets = int(text_buckets)
        self._video_proj: Dict[int, np.ndarray] = {}
        self._text_proj: np.ndarray | None = None

    def _projection(self, in_dim: int) -> np.ndarray:
        mat = self._video_proj.get(in_dim)
        if mat is None:
            rng = np.random.default_rng([self.seed, _VIDEO_STREAM, in_dim, self.dim])
            mat = rng.standard_normal((in_dim, self.dim)) / np.sqrt(in_dim)
            self._video_proj[in_dim] = mat
        return mat

    def _text_projection(self) -> np.ndarray:
        if self._text_proj is None:
            rng = np.random.default_rng(
                [self.seed, _TEXT_STREAM, self.text_buckets, self.dim])
            self._text_proj = (rng.standard_normal((self.text_buckets, self.dim))
                               / np.sqrt(self.text_buckets))
        return self._text_proj

    def encode_window(self, window: FrameWindow) -> Embedding:
        pooled = window.frames.mean(axis=0)
        projected = pooled @ self._projection(pooled.shape[0])
        return Embedding(_unit(projected, "projected window"), "video")

    def encode_text(self, caption: str) -> Embedding:
        text = caption.strip()
        if not text:
            raise EmptyInputError("caption is empty after whitespace trim")
        counts = np.zeros(self.text_buckets, dtype=np.float64)
        for token in text.lower().split():
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            counts[int.from_bytes(digest[:8], "little") % self.text_buckets] += 1.0
        projected = counts @ self._text_projection()
        return Embedding(_unit(projected, "projected caption"), "text")

    def state_hash(self) -> str:
        # Projections are derived, not state: hashing the defining config is
        # the honest frozen-encoder fingerprint.
        h = hashlib.sha256()
        h.update(f"stub:{self.dim}:{self.seed}:{self.text_buckets}".encode())
        return h.hexdigest()


class CachedEncoder:
    """Encoder backed by an offline embedding-cache file.

    Video windows must carry a ``key``; captions are looked up by their
    trimmed text.  Vectors are returned exactly as stored.
    """

    def __init__(self, path):
        self._table, self.dim = read_embedding_cache(path)
        self._digest = hashlib.sha256(
            b"".join(k.encode() + v.tobytes() for k, v in self._table.items())
        ).hexdigest()

    def _lookup(self, key: str, source: str) -> Embedding:
        vec = self._table.get(key)
        if vec is None:
            raise ValidationError(f"embedding id {key!r} not present in cache")
        return Embedding(vec, source)

    def encode_window(self, window: FrameWindow) -> Embedding:
        if window.key is None:
            raise ValidationError("cache-backed encoding requires a window key")
        return self._lookup(window.key, "video")

    def encode_text(self, caption: str) -> Embedding:
        return self._lookup(caption.strip(), "text")

    def state_hash(self) -> str:
        return self._digest


def encode_video_snippet(window: FrameWindow, encoder: EncoderHandle) -> Embedding:
    """Encode one frame window into a video embedding of the encoder's dim."""
    if len(window) < 1:
        raise EmptyInputError("cannot encode an empty window")
    emb = encoder.encode_window(window)
    if emb.dim != encoder.dim:
        raise DimensionMismatchError(
            f"encoder produced dim {emb.dim}, configured for {encoder.dim}")
    return emb


def encode_text(caption: str, encoder: EncoderHandle) -> Embedding:
    """Encode one caption into a text embedding of the encoder's dim."""
    emb = encoder.encode_text(caption)
    if emb.dim != encoder.dim:
        raise DimensionMismatchError(
            f"encoder produced dim {emb.dim}, configured for {encoder.dim}")
    return emb


def write_embedding_cache(path, entries: Mapping[str, np.ndarray] | Iterable[Tuple[str, np.ndarray]],
                          dim: int) -> int:
    """Write the binary embedding cache (single writer).

    Layout, little-endian: magic ``VLEC``, version u32, dim u32, count u64,
    then per record a u16 id length, the UTF-8 id, and dim float32 values.
    Returns the number of records written.
    """
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQ", CACHE_MAGIC, CACHE_VERSION, dim, len(items)))
        for key, vec in items:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise DimensionMismatchError(
                    f"cache entry {key!r} has shape {vec.shape}, expected ({dim},)")
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValidationError(f"embedding id too long: {key!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())
    return len(items)


def read_embedding_cache(path) -> Tuple[Dict[str, np.ndarray], int]:
    """Read a cache file back into an id -> float32 vector table."""
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIQ"))
        magic, version, dim, count = struct.unpack("<4sIIQ", header)
        if magic != CACHE_MAGIC:
            raise ValidationError(f"not an embedding cache file: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise ValidationError(f"unsupported cache version {version}")
        table: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (klen,) = struct.unpack("<H", fh.read(2))
            key = fh.read(klen).decode("utf-8")
            vec = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
            if vec.shape != (dim,):
                raise ValidationError("truncated embedding cache file")
            table[key] = vec
    return table, int(dim)
