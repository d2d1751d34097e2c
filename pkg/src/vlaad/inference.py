"""Causal streaming inference and the driver-bridge global-state token.

A tick-driven ring buffer holds the last K subsampled frames (never future
ones); the risk token is recomputed only on subsample ticks and served from
cache in between, which cuts encoder calls by the subsample factor with
bit-identical outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, NamedTuple

import numpy as np

from .embeddings import EncoderHandle, FrameWindow, encode_video_snippet
from .errors import ValidationError
from .mil import RiskTrace, pooling_attention, segment_clip
from .model import ModelCheckpoint, adapt, detect_logit, forward_bag
from .numerics import sigmoid

DEFAULT_BUFFER_FRAMES = 8
DEFAULT_SUBSAMPLE_PERIOD = 5
DEFAULT_TICK_RATE_HZ = 20.0
NEUTRAL_TOKEN = 0.5  # sigmoid(0): the pre-buffer convention


@dataclass
class CausalBuffer:
    """Ring of the most recent K subsampled frames, single-writer.

    The buffer content changes only on ticks that are multiples of
    ``subsample_period``; frames arriving on other ticks are dropped, so at
    20 Hz ticks with period 5 the buffer tracks an effective 4 Hz stream.
    """

    encoder: EncoderHandle
    size: int = DEFAULT_BUFFER_FRAMES
    subsample_period: int = DEFAULT_SUBSAMPLE_PERIOD
    tick_rate_hz: float = DEFAULT_TICK_RATE_HZ
    frames: List[np.ndarray] = field(default_factory=list)
    frame_ticks: List[int] = field(default_factory=list)
    last_update_tick: int | None = None
    cached_token: float = NEUTRAL_TOKEN
    encoder_calls: int = 0
    _last_tick: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.size < 1 or self.subsample_period < 1:
            raise ValidationError("buffer size and period must be >= 1")

    def _compute_token(self, ckpt: ModelCheckpoint) -> float:
        if not self.frames:
            return NEUTRAL_TOKEN  # zero-logit convention before any frame
        window = FrameWindow(
            frames=np.stack(self.frames),
            timestamps=np.asarray(self.frame_ticks, dtype=np.float64)
            / self.tick_rate_hz)
        emb = encode_video_snippet(window, self.encoder)
        self.encoder_calls += 1
        logit = detect_logit(adapt(emb, ckpt.adapter), ckpt.detector)
        return float(sigmoid(logit))


def push_tick(buffer: CausalBuffer, frame, tick: int, ckpt: ModelCheckpoint,
              caching: bool = True) -> float:
    """Advance one tick and return the risk token in [0, 1].

    On update ticks (tick divisible by the subsample period) the frame joins
    the ring and the token is recomputed; on other ticks the cached token is
    returned, or recomputed from the identical buffer when caching is off.
    """
    if buffer._last_tick is not None and tick <= buffer._last_tick:
        raise ValidationError(
            f"out-of-order tick {tick} after {buffer._last_tick}")
    buffer._last_tick = tick
    if tick % buffer.subsample_period == 0:
        buffer.frames.append(np.asarray(frame, dtype=np.float64))
        buffer.frame_ticks.append(tick)
        if len(buffer.frames) > buffer.size:
            buffer.frames.pop(0)
            buffer.frame_ticks.pop(0)
        buffer.last_update_tick = tick
        buffer.cached_token = buffer._compute_token(ckpt)
        return buffer.cached_token
    if caching:
        return buffer.cached_token
    return buffer._compute_token(ckpt)  # same buffer, bit-identical token


class ClipTrace(NamedTuple):
    trace: RiskTrace
    timestamps: np.ndarray  # snippet start seconds
    attention: np.ndarray


def score_clip_trace(clip, ckpt: ModelCheckpoint, encoder: EncoderHandle,
                     snippet_len: int = 8, stride: int = 8) -> ClipTrace:
    """Per-snippet risk trace of one clip, identical numbers to a bag pass."""
    bag = segment_clip(clip, snippet_len, stride, encoder)
    trace = forward_bag(bag, ckpt)
    return ClipTrace(trace, bag.start_times.copy(),
                     pooling_attention(trace.logits, ckpt.gamma))


def make_global_state(risk: float, velocity: float, command_index: int,
                      command_count: int) -> np.ndarray:
    """Concatenate [risk, velocity, onehot(command)] in that fixed order.

    Out-of-range risk is an error, never a silent clamp.
    """
    if not (0.0 <= risk <= 1.0):
        raise ValidationError(f"risk {risk} outside [0, 1]")
    if velocity < 0:
        raise ValidationError("velocity must be >= 0")
    if not (0 <= command_index < command_count):
        raise ValidationError(
            f"command index {command_index} outside [0, {command_count})")
    state = np.zeros(2 + command_count, dtype=np.float64)
    state[0] = risk
    state[1] = velocity
    state[2 + command_index] = 1.0
    return state


def serialize_global_state(state: np.ndarray) -> str:
    return json.dumps([float(x) for x in state])


def parse_global_state(text: str) -> np.ndarray:
    values = np.asarray(json.loads(text), dtype=np.float64)
    if values.ndim != 1 or values.size < 3:
        raise ValidationError("global state must be [risk, velocity, onehot...]")
    onehot = values[2:]
    if abs(float(onehot.sum()) - 1.0) > 1e-9 or np.any(onehot < 0):
        raise ValidationError("command one-hot must sum to 1")
    return values


def toy_policy_step(state: np.ndarray, weights: np.ndarray,
                    bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map of the global state to 2 waypoints (4 reals).

    Stand-in consumer for the risk token; deterministic by construction.
    """
    state = np.asarray(state, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (state.size, 4):
        raise ValidationError(
            f"policy weights must be ({state.size}, 4), got {weights.shape}")
    out = state @ weights
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (4,):
            raise ValidationError("policy bias must have shape (4,)")
        out = out + bias
    return out


def stream_tokens(lines: Iterable[str], ckpt: ModelCheckpoint,
                  encoder: EncoderHandle, size: int = DEFAULT_BUFFER_FRAMES,
                  subsample_period: int = DEFAULT_SUBSAMPLE_PERIOD,
                  tick_rate_hz: float = DEFAULT_TICK_RATE_HZ,
                  caching: bool = True) -> Iterator[float]:
    """Drive a buffer from newline-delimited JSON frames.

    Each line is {"tick": int, "features": [...]}; yields one token per tick.
    """
    buffer = CausalBuffer(encoder, size=size, subsample_period=subsample_period,
                          tick_rate_hz=tick_rate_hz)
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            tick = int(obj["tick"])
            frame = np.asarray(obj["features"], dtype=np.float64)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ValidationError(f"stream line {lineno}: {exc}") from exc
        yield push_tick(buffer, frame, tick, ckpt, caching=caching)
