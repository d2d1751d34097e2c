"""Dataset model: clip assembly from frame streams and infraction logs,
collision-position augmentation, synthetic desk-scale generation, and the
two-stage captioning pipeline with a pluggable summarizer client.

Clips are 10-second windows of 40 frames sampled at 4 Hz.  Assembly places
each collision uniformly inside the [2.5 s, 7.5 s] band of its clip (frames
10..30); position augmentation re-crops copies with the collision anywhere
in the [0.1, 0.9] band (frames 4..36).
"""

from __future__ import annotations

import base64
import hashlib
import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Protocol, Sequence, Tuple

import numpy as np

from .errors import EmptyInputError, SummarizerError, ValidationError

CLIP_FRAMES = 40
FRAME_HZ = 4.0
INFRACTION_TYPES = ("vehicle", "pedestrian", "layout")

# Collision placement band for assembly: [2.5 s, 7.5 s] at 4 Hz.
ASSEMBLY_MIN_FRAME = 10
ASSEMBLY_MAX_FRAME = 30
# Placement band for augmentation: [0.1, 0.9] of the clip length.
AUGMENT_MIN_FRAME = 4
AUGMENT_MAX_FRAME = 36
# Negative mining keeps a guard band of frames around every infraction.
NEGATIVE_GUARD_FRAMES = 40

SPLITS = ("train", "test")
SOURCES = ("assembled", "augmented", "synthetic", "external")


@dataclass
class InfractionLog:
    """One simulator infraction entry."""

    frame_number: int
    infraction_type: str
    message: str
    scenario_type: str

    def __post_init__(self):
        if self.frame_number < 0:
            raise ValidationError("infraction frame_number must be >= 0")
        if self.infraction_type not in INFRACTION_TYPES:
            raise ValidationError(
                f"infraction type {self.infraction_type!r} not in {INFRACTION_TYPES}")


@dataclass
class ClipRecord:
    """One clip: features, caption, label, and collision metadata.

    ``source_stream``/``source_start`` point back into the stream a clip was
    cropped from; they enable position augmentation and are never serialized.
    """

    clip_id: str
    features: np.ndarray | None = None  # (F, feat) float32
    frames_path: str | None = None
    caption: str = ""
    label: int = 0
    collision_frame: int | None = None
    infraction: InfractionLog | None = None
    split: str = "train"
    source: str = "synthetic"
    event_window: Tuple[int, int] | None = None  # [start, end) snippet indices
    source_stream: np.ndarray | None = field(default=None, repr=False)
    source_start: int | None = field(default=None, repr=False)

    frame_hz = FRAME_HZ

    def __post_init__(self):
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float32)
        validate_record(self)

    def feature_matrix(self) -> np.ndarray:
        if self.features is not None:
            return self.features
        if self.frames_path is not None:
            return np.asarray(np.load(self.frames_path), dtype=np.float32)
        raise ValidationError(f"clip {self.clip_id} carries no frame features")

    @property
    def n_frames(self) -> int:
        return int(self.feature_matrix().shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_frames / FRAME_HZ


def validate_record(rec: ClipRecord) -> None:
    """Re-checkable schema invariants; also re-run on every manifest write."""
    if not rec.clip_id:
        raise ValidationError("clip_id must be non-empty")
    if rec.label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {rec.label}")
    if (rec.label == 1) != (rec.collision_frame is not None):
        raise ValidationError(
            f"clip {rec.clip_id}: label 1 iff collision_frame present")
    if rec.split not in SPLITS:
        raise ValidationError(f"split {rec.split!r} not in {SPLITS}")
    if rec.source not in SOURCES:
        raise ValidationError(f"source {rec.source!r} not in {SOURCES}")
    if rec.features is None and rec.frames_path is None:
        raise ValidationError(f"clip {rec.clip_id} needs features or a frames path")
    if rec.features is not None:
        if rec.features.ndim != 2 or rec.features.shape[0] < 1:
            raise ValidationError(f"clip {rec.clip_id}: features must be (F, dim)")
        if not np.all(np.isfinite(rec.features)):
            raise ValidationError(f"clip {rec.clip_id}: non-finite features")
        n = rec.features.shape[0]
        if rec.source in ("assembled", "augmented", "synthetic") and n != CLIP_FRAMES:
            raise ValidationError(
                f"clip {rec.clip_id}: expected {CLIP_FRAMES} frames, got {n}")
        if rec.collision_frame is not None and not (0 <= rec.collision_frame < n):
            raise ValidationError(f"clip {rec.clip_id}: collision_frame out of range")
    if rec.collision_frame is not None:
        if rec.source == "assembled" and not (
                ASSEMBLY_MIN_FRAME <= rec.collision_frame <= ASSEMBLY_MAX_FRAME):
            raise ValidationError(
                f"clip {rec.clip_id}: assembled collision frame "
                f"{rec.collision_frame} outside [{ASSEMBLY_MIN_FRAME}, "
                f"{ASSEMBLY_MAX_FRAME}]")
        if rec.source == "augmented" and not (
                AUGMENT_MIN_FRAME <= rec.collision_frame <= AUGMENT_MAX_FRAME):
            raise ValidationError(
                f"clip {rec.clip_id}: augmented collision frame out of band")
    if rec.infraction is not None and rec.infraction.infraction_type not in INFRACTION_TYPES:
        raise ValidationError("invalid infraction type")
    if rec.event_window is not None:
        s, e = rec.event_window
        if not (0 <= s < e):
            raise ValidationError(f"clip {rec.clip_id}: bad event window {rec.event_window}")


class AssemblyResult(NamedTuple):
    clips: List[ClipRecord]
    skipped: List[str]


def assemble_clips(stream: np.ndarray, logs: Sequence[InfractionLog], seed: int = 0,
                   stream_id: str = "stream") -> AssemblyResult:
    """Cut a 4 Hz frame-feature stream into labeled 40-frame clips.

    One positive clip per infraction, its collision frame placed uniformly in
    [2.5 s, 7.5 s]; infractions too close to the stream edges to admit any
    legal placement are skipped with a report.  The frames left over outside
    a guard band around every infraction are tiled into negative clips.
    """
    stream = np.asarray(stream, dtype=np.float32)
    if stream.ndim != 2:
        raise ValidationError("stream must be a (frames, features) matrix")
    total = stream.shape[0]
    rng = np.random.default_rng(seed)
    clips: List[ClipRecord] = []
    skipped: List[str] = []

    for i, log in enumerate(sorted(logs, key=lambda l: l.frame_number)):
        if log.frame_number >= total:
            raise ValidationError(
                f"infraction at frame {log.frame_number} beyond stream end {total}")
        lo = max(ASSEMBLY_MIN_FRAME, log.frame_number + CLIP_FRAMES - total)
        hi = min(ASSEMBLY_MAX_FRAME, log.frame_number)
        if lo > hi:
            skipped.append(
                f"infraction at frame {log.frame_number}: no legal placement "
                f"inside [{ASSEMBLY_MIN_FRAME}, {ASSEMBLY_MAX_FRAME}]")
            continue
        k = int(rng.integers(lo, hi + 1))
        start = log.frame_number - k
        clips.append(ClipRecord(
            clip_id=f"{stream_id}-pos{i:04d}",
            features=stream[start:start + CLIP_FRAMES].copy(),
            label=1, collision_frame=k, infraction=log,
            source="assembled",
            source_stream=stream, source_start=start,
        ))

    # Guard zones around infractions; the gaps between them become negatives.
    zones = sorted((max(0, l.frame_number - NEGATIVE_GUARD_FRAMES),
                    min(total, l.frame_number + NEGATIVE_GUARD_FRAMES + 1))
                   for l in logs)
    merged: List[List[int]] = []
    for a, b in zones:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    gaps, prev = [], 0
    for a, b in merged:
        if a > prev:
            gaps.append((prev, a))
        prev = b
    if prev < total:
        gaps.append((prev, total))

    neg_idx = 0
    for a, b in gaps:
        s = a
        while s + CLIP_FRAMES <= b:
            clips.append(ClipRecord(
                clip_id=f"{stream_id}-neg{neg_idx:04d}",
                features=stream[s:s + CLIP_FRAMES].copy(),
                label=0, source="assembled",
                source_stream=stream, source_start=s,
            ))
            neg_idx += 1
            s += CLIP_FRAMES
    return AssemblyResult(clips, skipped)


def augment_collision_position(clip: ClipRecord, copies: int = 5,
                               seed: int = 0) -> List[ClipRecord]:
    """Re-crop a positive clip so the collision lands anywhere in [0.1, 0.9].

    Each copy draws a new collision index uniformly from the feasible part of
    [4, 36] and re-cuts the clip from the source stream; ids get a
    deterministic ``#augN`` suffix.
    """
    if clip.label != 1 or clip.collision_frame is None:
        raise ValidationError("position augmentation requires a positive clip")
    if copies < 0:
        raise ValidationError("copies must be >= 0")
    if copies == 0:
        return []
    if clip.source_stream is None or clip.source_start is None:
        raise ValidationError(
            f"clip {clip.clip_id} has no re-croppable source stream")
    stream = clip.source_stream
    total = stream.shape[0]
    abs_frame = clip.source_start + clip.collision_frame
    lo = max(AUGMENT_MIN_FRAME, abs_frame + CLIP_FRAMES - total)
    hi = min(AUGMENT_MAX_FRAME, abs_frame)
    if lo > hi:
        raise ValidationError(
            f"clip {clip.clip_id}: source stream too short to re-crop")
    id_hash = int.from_bytes(
        hashlib.sha256(clip.clip_id.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng([seed, id_hash])
    out = []
    for j in range(copies):
        k = int(rng.integers(lo, hi + 1))
        start = abs_frame - k
        out.append(ClipRecord(
            clip_id=f"{clip.clip_id}#aug{j}",
            features=stream[start:start + CLIP_FRAMES].copy(),
            caption=clip.caption, label=1, collision_frame=k,
            infraction=clip.infraction, split=clip.split, source="augmented",
            source_stream=stream, source_start=start,
        ))
    return out


# Caption template pools for the synthetic generator.  Kept disjoint so the
# text modality carries signal.
COLLISION_CAPTIONS = (
    "a vehicle collides with a pedestrian crossing the road",
    "the ego car crashes into a slowing vehicle ahead",
    "a sudden impact with a static obstacle at the roadside",
    "the car hits a crossing cyclist while turning",
    "another vehicle cuts in sharply and a collision occurs",
)
NORMAL_CAPTIONS = (
    "the car drives steadily along its lane",
    "the vehicle cruises through light traffic without incident",
    "the ego car waits at a red light and then proceeds",
    "a smooth drive past parked cars on a clear road",
    "the car follows the road through a quiet intersection",
)


@dataclass
class SynthConfig:
    """Configuration of the synthetic feature-level dataset."""

    n_normal: int
    n_collision: int
    feature_dim: int = 32
    separation: float = 4.0  # mean shift of event-window snippet features
    event_len: int = 1  # event window length, in snippets
    seed: int = 0
    clip_frames: int = CLIP_FRAMES
    snippet_len: int = 8

    def __post_init__(self):
        if self.n_normal < 0 or self.n_collision < 0:
            raise ValidationError("record counts must be >= 0")
        if self.separation < 0:
            raise ValidationError("separation must be >= 0")
        if self.feature_dim < 1 or self.snippet_len < 1:
            raise ValidationError("feature_dim and snippet_len must be >= 1")
        if not (1 <= self.event_len <= self.n_slots):
            raise ValidationError("event_len must fit inside the clip")

    @property
    def n_slots(self) -> int:
        return self.clip_frames // self.snippet_len


def generate_synthetic_dataset(cfg: SynthConfig, split: str = "train") -> List[ClipRecord]:
    """Pure function of (config, split): byte-identical records per seed.

    Each of the clip's snippet slots draws one standard-normal feature vector
    that is tiled across the slot's frames, so a snippet-level mean pool
    recovers exactly the drawn vector.  Collision clips shift the vectors of
    a uniformly placed event window by ``separation`` along a fixed seeded
    unit direction; the window is recorded for localization checks.
    """
    rng = np.random.default_rng([cfg.seed, 9001])
    direction = rng.standard_normal(cfg.feature_dim)
    direction /= np.linalg.norm(direction)
    records: List[ClipRecord] = []

    def draw_clip(positive: bool, idx: int) -> ClipRecord:
        slot_feats = rng.standard_normal((cfg.n_slots, cfg.feature_dim))
        window = None
        collision_frame = None
        if positive:
            start = int(rng.integers(0, cfg.n_slots - cfg.event_len + 1))
            window = (start, start + cfg.event_len)
            slot_feats[start:window[1]] += cfg.separation * direction
            collision_frame = start * cfg.snippet_len + cfg.snippet_len // 2
        pool = COLLISION_CAPTIONS if positive else NORMAL_CAPTIONS
        caption = pool[int(rng.integers(0, len(pool)))]
        frames = np.repeat(slot_feats, cfg.snippet_len, axis=0)
        pad = cfg.clip_frames - frames.shape[0]
        if pad > 0:  # clip length not divisible by snippet length
            frames = np.vstack([frames, np.tile(frames[-1:], (pad, 1))])
        tag = "c" if positive else "n"
        return ClipRecord(
            clip_id=f"synth-{split}-{tag}{idx:05d}",
            features=frames.astype(np.float32),
            caption=caption,
            label=int(positive),
            collision_frame=collision_frame,
            split=split,
            source="synthetic",
            event_window=window,
        )

    for i in range(cfg.n_normal):
        records.append(draw_clip(False, i))
    for i in range(cfg.n_collision):
        records.append(draw_clip(True, i))
    return records


# --- Captioning -----------------------------------------------------------

SUMMARIZE_PROMPT = (
    "Summarize the following text:\n{input_text}\n"
    "Only output the summarized message with nothing before it."
)
PARAPHRASE_PROMPT = (
    "Paraphrase the following text while keeping the original meaning:\n"
    "{input_text}\n"
    "Only output the paraphrased message with nothing before it. "
    "The word drive must be in your response."
)
DEFAULT_SUMMARIZER_MODELS = ("llama3.2:3b", "gemma2:2b")
SUMMARIZER_URL_ENV = "VLAAD_SUMMARIZER_URL"
_RETRY_ATTEMPTS = 3


class SummarizerClient(Protocol):
    def generate(self, prompt: str, model: str) -> str: ...


class StubSummarizerClient:
    """Deterministic offline stand-in: echoes the first sentence of the
    prompt payload.  Keeps real LLM calls off the test path."""

    def generate(self, prompt: str, model: str) -> str:
        lines = prompt.splitlines()
        payload = " ".join(
            l for l in lines[1:] if not l.startswith("Only output")).strip()
        if ". " in payload:
            return payload.split(". ", 1)[0].strip() + "."
        return payload


class HttpSummarizerClient:
    """Minimal text-generation HTTP client (ollama-style JSON wire).

    POSTs {"model", "prompt", "stream": false} and reads {"response": ...}.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        if not url:
            raise ValidationError(
                f"summarizer URL required (set {SUMMARIZER_URL_ENV})")
        self.url = url
        self.timeout = timeout

    def generate(self, prompt: str, model: str) -> str:
        body = json.dumps({"model": model, "prompt": prompt,
                           "stream": False}).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise SummarizerError(f"summarizer request failed: {exc}") from exc
        if "response" not in payload:
            raise SummarizerError("summarizer reply missing 'response' field")
        return str(payload["response"])


def _generate_with_retry(client: SummarizerClient, prompt: str, model: str) -> str:
    """Call the client, retrying timeouts/transport errors up to 3 attempts.

    An empty response is a hard error, never retried, and nothing partial is
    returned.
    """
    last: Exception | None = None
    for _ in range(_RETRY_ATTEMPTS):
        try:
            text = client.generate(prompt, model)
        except (SummarizerError, TimeoutError, OSError) as exc:
            last = exc
            continue
        if not text or not text.strip():
            raise SummarizerError("summarizer returned an empty response")
        return text.strip()
    raise SummarizerError(
        f"summarizer unreachable after {_RETRY_ATTEMPTS} attempts: {last}")


def _pick_model(rng: np.random.Generator, models: Sequence[str]) -> str:
    return models[int(rng.integers(0, len(models)))]


def caption_collision_clip(log: InfractionLog, client: SummarizerClient,
                           rng: np.random.Generator | None = None,
                           models: Sequence[str] = DEFAULT_SUMMARIZER_MODELS) -> str:
    """Summarize one infraction log into a collision caption.

    The generation model is drawn with equal probability from ``models`` for
    every call.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    input_text = f"{log.message} Scenario type: {log.scenario_type}."
    prompt = SUMMARIZE_PROMPT.format(input_text=input_text)
    return _generate_with_retry(client, prompt, _pick_model(rng, models))


class CaptionResult(NamedTuple):
    text: str
    warning: bool


def caption_normal_clip(frame_annotations: Sequence[str], client: SummarizerClient,
                        rng: np.random.Generator | None = None,
                        models: Sequence[str] = DEFAULT_SUMMARIZER_MODELS,
                        paraphrase: bool = False) -> CaptionResult:
    """Two-stage summary of per-frame annotations into one clip caption.

    Stage 1 summarizes each frame annotation individually; stage 2 summarizes
    the concatenation.  When ``paraphrase`` is set, the paraphrasing prompt is
    applied afterwards and its lexical constraint ("drive" must appear) is
    validated, with exactly one re-query; a caption that still violates the
    constraint is retained but flagged.
    """
    if not frame_annotations:
        raise EmptyInputError("at least one frame annotation required")
    rng = rng if rng is not None else np.random.default_rng(0)
    stage1 = []
    for ann in frame_annotations:
        prompt = SUMMARIZE_PROMPT.format(input_text=ann)
        stage1.append(_generate_with_retry(client, prompt, _pick_model(rng, models)))
    prompt = SUMMARIZE_PROMPT.format(input_text="\n".join(stage1))
    caption = _generate_with_retry(client, prompt, _pick_model(rng, models))
    if not paraphrase:
        return CaptionResult(caption, False)
    out = _generate_with_retry(
        client, PARAPHRASE_PROMPT.format(input_text=caption),
        _pick_model(rng, models))
    if "drive" not in out.lower():
        out = _generate_with_retry(  # single re-query on constraint violation
            client, PARAPHRASE_PROMPT.format(input_text=caption),
            _pick_model(rng, models))
        if "drive" not in out.lower():
            return CaptionResult(out, True)
    return CaptionResult(out, False)


# --- Manifest serialization (JSON Lines) ----------------------------------

def _frames_to_json(rec: ClipRecord):
    if rec.frames_path is not None:
        return rec.frames_path
    feats = np.ascontiguousarray(rec.features, dtype="<f4")
    return {"shape": list(feats.shape), "dtype": "f32",
            "b64": base64.b64encode(feats.tobytes()).decode("ascii")}


def _frames_from_json(obj):
    if isinstance(obj, str):
        return None, obj
    shape = tuple(obj["shape"])
    raw = base64.b64decode(obj["b64"])
    feats = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return feats, None


def record_to_json(rec: ClipRecord) -> dict:
    validate_record(rec)
    out = {
        "clip_id": rec.clip_id,
        "frames": _frames_to_json(rec),
        "caption": rec.caption,
        "label": rec.label,
        "collision_frame": rec.collision_frame,
        "infraction": None if rec.infraction is None else {
            "frame_number": rec.infraction.frame_number,
            "type": rec.infraction.infraction_type,
            "message": rec.infraction.message,
            "scenario": rec.infraction.scenario_type,
        },
        "split": rec.split,
        "source": rec.source,
    }
    if rec.event_window is not None:
        out["event_window"] = list(rec.event_window)
    return out


def record_from_json(obj: dict) -> ClipRecord:
    feats, path = _frames_from_json(obj["frames"])
    inf = obj.get("infraction")
    infraction = None if inf is None else InfractionLog(
        frame_number=inf["frame_number"], infraction_type=inf["type"],
        message=inf["message"], scenario_type=inf["scenario"])
    window = obj.get("event_window")
    return ClipRecord(
        clip_id=obj["clip_id"], features=feats, frames_path=path,
        caption=obj.get("caption", ""), label=obj["label"],
        collision_frame=obj.get("collision_frame"), infraction=infraction,
        split=obj.get("split", "train"), source=obj.get("source", "external"),
        event_window=None if window is None else (window[0], window[1]),
    )


def write_manifest(records: Iterable[ClipRecord], path) -> int:
    """Append-ordered JSONL manifest; every record is re-validated on write."""
    ids = set()
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if rec.clip_id in ids:
                raise ValidationError(f"duplicate clip_id {rec.clip_id!r}")
            ids.add(rec.clip_id)
            fh.write(json.dumps(record_to_json(rec), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_manifest(path) -> List[ClipRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValidationError(f"manifest line {lineno}: {exc}") from exc
    return records
