"""Bag construction and multiple-instance aggregation of snippet logits.

A clip is a bag of temporally ordered snippets with a single clip-level
label.  Snippet logits are pooled with a temperature-controlled log-sum-exp
that interpolates between the mean (small gamma) and the max (large gamma):

    pool(z) = max-shifted (1/gamma) * (log sum_t exp(gamma * z_t) - log T)

The pooling-induced attention softmax(gamma * z) is exactly the gradient of
the pooled value with respect to the snippet logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .embeddings import EncoderHandle, FrameWindow, encode_video_snippet
from .errors import EmptyInputError, ValidationError
from .numerics import sigmoid

if TYPE_CHECKING:  # pragma: no cover
    from .datakit import ClipRecord

DEFAULT_GAMMA = 10.0
DEFAULT_SNIPPET_LEN = 8
DEFAULT_SNIPPET_STRIDE = 8


@dataclass
class Bag:
    """Ordered snippet embeddings of one clip; label lives at bag level only."""

    clip_id: str
    snippets: np.ndarray  # (T, D) float32
    start_times: np.ndarray  # (T,) seconds
    label: int

    def __post_init__(self):
        self.snippets = np.asarray(self.snippets, dtype=np.float32)
        self.start_times = np.asarray(self.start_times, dtype=np.float64)
        if self.snippets.ndim != 2 or self.snippets.shape[0] < 1:
            raise EmptyInputError("bag must contain at least one snippet")
        if self.start_times.shape != (self.snippets.shape[0],):
            raise ValidationError("one start time per snippet required")
        if np.any(np.diff(self.start_times) <= 0):
            raise ValidationError("snippet start times must be strictly increasing")
        if self.label not in (0, 1):
            raise ValidationError(f"bag label must be 0 or 1, got {self.label}")

    @property
    def size(self) -> int:
        return int(self.snippets.shape[0])


@dataclass
class RiskTrace:
    """Per-snippet logits of one clip plus their pooled value."""

    clip_id: str
    logits: np.ndarray  # (T,)
    pooled: float
    prob: float
    gamma: float

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        lo, hi = float(self.logits.mean()), float(self.logits.max())
        if not (lo - 1e-9 <= self.pooled <= hi + 1e-9):
            raise ValidationError(
                f"pooled logit {self.pooled} outside [mean, max] = [{lo}, {hi}]")


def _check_pool_args(logits, gamma) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise EmptyInputError("logit sequence must be non-empty and 1-D")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    if not (gamma > 0):
        raise ValidationError(f"gamma must be positive, got {gamma}")
    return z


def lse_pool(logits, gamma: float = DEFAULT_GAMMA) -> float:
    """Temperature-controlled log-sum-exp pooling of snippet logits.

    Computed with the max-shift trick so that exp never overflows even for
    logits of magnitude 1e4.
    """
    z = _check_pool_args(logits, gamma)
    m = float(z.max())
    return m + (np.log(np.exp(gamma * (z - m)).sum()) - np.log(z.size)) / gamma


def pooling_attention(logits, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """softmax(gamma * z): positive weights summing to 1.

    Equals the gradient of ``lse_pool`` with respect to each logit, so it is
    the canonical per-snippet contribution weighting induced by the pooling.
    """
    z = _check_pool_args(logits, gamma)
    shifted = np.exp(gamma * (z - z.max()))
    return shifted / shifted.sum()


def segment_clip(clip: "ClipRecord", snippet_len: int = DEFAULT_SNIPPET_LEN,
                 stride: int = DEFAULT_SNIPPET_STRIDE,
                 encoder: EncoderHandle | None = None) -> Bag:
    """Slice a clip's frame features into encoded snippets, order preserved.

    Produces T = floor((F - snippet_len) / stride) + 1 snippets at 4 Hz
    frame timing.
    """
    if encoder is None:
        raise ValidationError("segment_clip requires an encoder")
    if snippet_len < 1 or stride < 1:
        raise ValidationError("snippet_len and stride must be >= 1")
    feats = clip.feature_matrix()
    n_frames = feats.shape[0]
    if n_frames < snippet_len:
        raise ValidationError(
            f"clip {clip.clip_id} has {n_frames} frames, fewer than "
            f"snippet_len {snippet_len}")
    starts = range(0, n_frames - snippet_len + 1, stride)
    rows, times = [], []
    for i, s in enumerate(starts):
        window = FrameWindow(
            frames=feats[s:s + snippet_len],
            timestamps=(np.arange(s, s + snippet_len) / clip.frame_hz),
            key=f"{clip.clip_id}:{i}",
        )
        rows.append(encode_video_snippet(window, encoder).values)
        times.append(s / clip.frame_hz)
    return Bag(clip_id=clip.clip_id, snippets=np.stack(rows),
               start_times=np.asarray(times), label=clip.label)


def make_trace(clip_id: str, logits, gamma: float) -> RiskTrace:
    """Bundle logits into a RiskTrace with pooled logit and probability."""
    pooled = lse_pool(logits, gamma)
    return RiskTrace(clip_id=clip_id, logits=np.asarray(logits, dtype=np.float64),
                     pooled=pooled, prob=float(sigmoid(pooled)), gamma=gamma)
