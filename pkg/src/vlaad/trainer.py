"""Optimization loop over stub or cached embeddings.

Only the adapter, the detector, and the two log-variance loss weights are
trainable; encoders are frozen inputs.  All gradients are analytic and
float64, verified against central finite differences by ``gradient_check``.
Adam uses decoupled weight decay applied to weight tensors only (never to
biases or to the log-variance weights).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .datakit import ClipRecord
from .embeddings import EncoderHandle, FrameWindow, encode_text, encode_video_snippet
from .errors import NonFiniteLossError, ValidationError
from .losses import LossBreakdown, binary_cross_entropy_from_logit
from .mil import lse_pool, pooling_attention, segment_clip
from .model import (ModelCheckpoint, adapter_forward, heads_backward,
                    init_checkpoint)
from .numerics import sigmoid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_KEYS = ("w1", "b1", "w2", "b2", "w", "b", "s_sim", "s_cls")
DECAYED_KEYS = ("w1", "w2", "w")  # weight tensors only


@dataclass
class TrainConfig:
    """Training configuration; mirrored one-to-one by the CLI JSON config."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    train_batch: int = 256
    eval_batch: int = 64
    seed: int = 0
    gamma: float = 10.0
    mode: str = "mil"  # "mil" | "clip"
    split_fraction: float = 0.8
    pos_weight: float | str = "auto"  # "auto" = n_negative / n_positive
    embed_dim: int = 768
    hidden_dim: int = 256
    snippet_len: int = 8
    snippet_stride: int = 8
    zero_first_layer: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not (0.0 < self.split_fraction < 1.0):
            raise ValidationError("split_fraction must be in (0, 1)")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.mode not in ("mil", "clip"):
            raise ValidationError(f"mode must be 'mil' or 'clip', got {self.mode!r}")
        if self.train_batch < 1 or self.eval_batch < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.pos_weight != "auto" and not float(self.pos_weight) > 0:
            raise ValidationError("pos_weight must be positive or 'auto'")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


class SplitResult(NamedTuple):
    train: List[ClipRecord]
    validation: List[ClipRecord]
    warnings: List[str]


def split_dataset(records: Sequence[ClipRecord], fraction: float,
                  seed: int) -> SplitResult:
    """Seeded stratified split: disjoint, exhaustive, per-class counts
    preserved within one record.  A class missing from either side is
    reported as a warning, not an error."""
    if len(records) < 2:
        raise ValidationError("need at least 2 records to split")
    if not (0.0 < fraction < 1.0):
        raise ValidationError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train: List[ClipRecord] = []
    val: List[ClipRecord] = []
    warnings: List[str] = []
    for label in (0, 1):
        members = [r for r in records if r.label == label]
        if not members:
            warnings.append(f"class {label} absent from the dataset")
            continue
        order = rng.permutation(len(members))
        n_train = int(math.floor(fraction * len(members) + 0.5))
        chosen = [members[i] for i in order]
        train.extend(chosen[:n_train])
        val.extend(chosen[n_train:])
        if n_train == 0:
            warnings.append(f"class {label} absent from the train split")
        if n_train == len(members):
            warnings.append(f"class {label} absent from the validation split")
    return SplitResult(train, val, warnings)


@dataclass
class TrainExample:
    """One clip prepared for the objective: snippet block plus caption."""

    clip_id: str
    snippets: np.ndarray  # (T, D) float64; T == 1 in clip mode
    text: np.ndarray  # (D,) float64
    label: int
    event_window: Tuple[int, int] | None = None


def prepare_examples(records: Sequence[ClipRecord], encoder: EncoderHandle,
                     config: TrainConfig) -> List[TrainExample]:
    """Encode records into training examples (frozen-feature work up front)."""
    out = []
    for rec in records:
        if not rec.caption.strip():
            raise ValidationError(
                f"clip {rec.clip_id} has no caption; run captioning first")
        text = encode_text(rec.caption, encoder).values.astype(np.float64)
        if config.mode == "clip":
            feats = rec.feature_matrix()
            window = FrameWindow(
                frames=feats,
                timestamps=np.arange(feats.shape[0]) / rec.frame_hz,
                key=f"{rec.clip_id}:clip")
            snips = encode_video_snippet(window, encoder).values[None, :]
        else:
            bag = segment_clip(rec, config.snippet_len, config.snippet_stride,
                               encoder)
            snips = bag.snippets
        out.append(TrainExample(rec.clip_id, np.asarray(snips, np.float64),
                                text, rec.label, rec.event_window))
    return out


def _cosines_with_grads(adapted: np.ndarray, text: np.ndarray):
    """Row-wise cos(adapted_t, text) and its gradient in each row."""
    nt = np.linalg.norm(text)
    na = np.linalg.norm(adapted, axis=1)
    cos = adapted @ text / (na * nt)
    dcos = text[None, :] / (na * nt)[:, None] - (cos / (na * na))[:, None] * adapted
    return cos, dcos


def batch_objective(ckpt: ModelCheckpoint, batch: Sequence[TrainExample],
                    mode: str = "mil", pos_weight: float = 1.0,
                    unmatched: Sequence[np.ndarray] | None = None,
                    ) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Uncertainty-weighted objective and its analytic gradients.

    In MIL mode, positive bags weight per-snippet alignment by the
    pooling-induced attention (gradients flow through the attention as well)
    and negative bags average the clamped similarities.  In clip mode each
    example contributes a matched pair with its own caption plus one
    unmatched pair drawn from another sample (``unmatched`` holds those text
    vectors).

    Returns the loss breakdown (batch means) and gradients for every
    parameter in ``PARAM_KEYS`` order.  Scalar loss sums use ``math.fsum``
    (exactly order-independent); the linear-algebra reductions run as single
    stacked matrix products over all snippets of the batch.
    """
    if mode == "clip" and (unmatched is None or len(unmatched) != len(batch)):
        raise ValidationError("clip mode needs one unmatched caption per example")
    n = len(batch)
    if n == 0:
        raise ValidationError("empty batch")
    ws = 0.5 * math.exp(-ckpt.s_sim)
    wc = 0.5 * math.exp(-ckpt.s_cls)
    l_sims: List[float] = []
    l_clses: List[float] = []
    snips_blocks: List[np.ndarray] = []
    hidden_blocks: List[np.ndarray] = []
    adapted_blocks: List[np.ndarray] = []
    dz_blocks: List[np.ndarray] = []
    de_blocks: List[np.ndarray] = []

    for i, ex in enumerate(batch):
        snips = ex.snippets
        _, h, adapted = adapter_forward(snips, ckpt.adapter)
        z = adapted @ ckpt.detector.w + ckpt.detector.b
        if not np.all(np.isfinite(z)):
            raise NonFiniteLossError(
                f"non-finite snippet logits for clip {ex.clip_id}")
        t_count = z.shape[0]
        cos, dcos = _cosines_with_grads(adapted, ex.text)

        if mode == "mil":
            attn = pooling_attention(z, ckpt.gamma)
            pooled = lse_pool(z, ckpt.gamma)
            l_cls = binary_cross_entropy_from_logit(pooled, ex.label, pos_weight)
            d_pooled = (-pos_weight * ex.label * sigmoid(-pooled)
                        + (1 - ex.label) * sigmoid(pooled))
            dz_cls = d_pooled * attn
            if ex.label == 1:
                l_sim = float(attn @ (1.0 - cos))
                dz_sim = ckpt.gamma * attn * ((1.0 - cos) - l_sim)
                de_sim = attn[:, None] * (-dcos)
            else:
                l_sim = float(np.maximum(0.0, cos).mean())
                dz_sim = np.zeros_like(z)
                de_sim = (cos > 0)[:, None] * dcos / t_count
        else:
            l_cls = binary_cross_entropy_from_logit(float(z[0]), ex.label,
                                                    pos_weight)
            dz_cls = np.array([-pos_weight * ex.label * sigmoid(-float(z[0]))
                               + (1 - ex.label) * sigmoid(float(z[0]))])
            dz_sim = np.zeros_like(z)
            cu, dcu = _cosines_with_grads(adapted[:1], unmatched[i])
            c_un, dc_un = float(cu[0]), dcu[0]
            l_sim = (1.0 - float(cos[0])) + max(0.0, c_un)
            de_sim = (-dcos[0] + (c_un > 0) * dc_un)[None, :]

        l_sims.append(l_sim)
        l_clses.append(l_cls)
        snips_blocks.append(snips)
        hidden_blocks.append(h)
        adapted_blocks.append(adapted)
        dz_blocks.append((ws * dz_sim + wc * dz_cls) / n)
        de_blocks.append(ws * de_sim / n)

    grads = heads_backward(
        np.concatenate(snips_blocks), np.concatenate(hidden_blocks),
        np.concatenate(adapted_blocks), ckpt.adapter, ckpt.detector,
        np.concatenate(dz_blocks), np.concatenate(de_blocks))
    l_sim = math.fsum(l_sims) / n
    l_cls = math.fsum(l_clses) / n
    if not (np.isfinite(l_sim) and np.isfinite(l_cls)
            and all(np.all(np.isfinite(g)) for g in grads.values())):
        raise NonFiniteLossError("non-finite loss or gradient in batch objective")
    breakdown = LossBreakdown.compute(l_sim, l_cls, ckpt.s_sim, ckpt.s_cls)
    grads["s_sim"] = np.asarray([-ws * l_sim + 1.0])
    grads["s_cls"] = np.asarray([-wc * l_cls + 1.0])
    return breakdown, grads


def _theta_from_ckpt(ckpt: ModelCheckpoint) -> Dict[str, np.ndarray]:
    return {"w1": ckpt.adapter.w1.copy(), "b1": ckpt.adapter.b1.copy(),
            "w2": ckpt.adapter.w2.copy(), "b2": ckpt.adapter.b2.copy(),
            "w": ckpt.detector.w.copy(), "b": np.asarray([ckpt.detector.b]),
            "s_sim": np.asarray([ckpt.s_sim]), "s_cls": np.asarray([ckpt.s_cls])}


def _ckpt_from_theta(theta: Dict[str, np.ndarray],
                     template: ModelCheckpoint) -> ModelCheckpoint:
    ckpt = template.copy()
    ckpt.adapter.w1 = theta["w1"].copy()
    ckpt.adapter.b1 = theta["b1"].copy()
    ckpt.adapter.w2 = theta["w2"].copy()
    ckpt.adapter.b2 = theta["b2"].copy()
    ckpt.detector.w = theta["w"].copy()
    ckpt.detector.b = float(theta["b"][0])
    ckpt.s_sim = float(theta["s_sim"][0])
    ckpt.s_cls = float(theta["s_cls"][0])
    return ckpt


def flatten_params(ckpt: ModelCheckpoint) -> np.ndarray:
    theta = _theta_from_ckpt(ckpt)
    return np.concatenate([theta[k].ravel() for k in PARAM_KEYS])


def unflatten_params(vec: np.ndarray, template: ModelCheckpoint) -> ModelCheckpoint:
    theta = _theta_from_ckpt(template)
    offset = 0
    for key in PARAM_KEYS:
        size = theta[key].size
        theta[key] = np.asarray(vec[offset:offset + size],
                                dtype=np.float64).reshape(theta[key].shape)
        offset += size
    if offset != vec.size:
        raise ValidationError("parameter vector has the wrong length")
    return _ckpt_from_theta(theta, template)


def vector_objective(template: ModelCheckpoint, batch: Sequence[TrainExample],
                     mode: str = "mil", pos_weight: float = 1.0,
                     unmatched: Sequence[np.ndarray] | None = None,
                     ) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """Wrap ``batch_objective`` as a flat-vector (loss, gradient) handle."""

    def fn(vec: np.ndarray) -> Tuple[float, np.ndarray]:
        ckpt = unflatten_params(vec, template)
        breakdown, grads = batch_objective(ckpt, batch, mode, pos_weight,
                                           unmatched)
        flat = np.concatenate([grads[k].ravel() for k in PARAM_KEYS])
        return breakdown.l_total, flat

    return fn


def gradient_check(loss_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                   params: np.ndarray, step: float = 1e-5, n_coords: int = 64,
                   seed: int = 0) -> float:
    """Worst relative error of analytic vs central-difference gradients over
    a seeded random coordinate subset (at least ``n_coords`` when available).
    """
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_and_grad(params)
    if not np.all(np.isfinite(grad)):
        raise ValidationError("analytic gradient is non-finite")
    rng = np.random.default_rng(seed)
    count = min(n_coords, params.size)
    coords = rng.choice(params.size, size=count, replace=False)
    worst = 0.0
    for idx in coords:
        probe = params.copy()
        probe[idx] = params[idx] + step
        up, _ = loss_and_grad(probe)
        probe[idx] = params[idx] - step
        down, _ = loss_and_grad(probe)
        fd = (up - down) / (2.0 * step)
        denom = max(abs(fd), abs(grad[idx]), 1e-8)
        worst = max(worst, abs(fd - grad[idx]) / denom)
    return worst


class AdamState:
    """Adam moments with decoupled weight decay on weight tensors only."""

    def __init__(self, theta: Dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in theta.items()}
        self.v = {k: np.zeros_like(v) for k, v in theta.items()}
        self.t = 0

    def step(self, theta: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr: float, weight_decay: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for key in PARAM_KEYS:
            g = grads[key]
            self.m[key] = ADAM_BETA1 * self.m[key] + (1 - ADAM_BETA1) * g
            self.v[key] = ADAM_BETA2 * self.v[key] + (1 - ADAM_BETA2) * g * g
            update = (self.m[key] / bc1) / (np.sqrt(self.v[key] / bc2) + ADAM_EPS)
            if key in DECAYED_KEYS:
                update = update + weight_decay * theta[key]
            theta[key] -= lr * update


@dataclass
class EpochStats:
    epoch: int
    breakdown: LossBreakdown
    val_auc: float


class TrainResult(NamedTuple):
    checkpoint: ModelCheckpoint
    history: List[EpochStats]
    warnings: List[str]


def _resolve_pos_weight(config: TrainConfig, records: Sequence[ClipRecord]) -> float:
    if config.pos_weight != "auto":
        return float(config.pos_weight)
    n_pos = sum(r.label for r in records)
    n_neg = len(records) - n_pos
    return n_neg / n_pos if n_pos else 1.0


def scores_for(ckpt: ModelCheckpoint, examples: Sequence[TrainExample],
               mode: str, eval_batch: int = 64) -> np.ndarray:
    """Bag probabilities (MIL pooled, or the single clip logit in clip mode)."""
    probs = np.empty(len(examples))
    for start in range(0, len(examples), eval_batch):
        for i, ex in enumerate(examples[start:start + eval_batch], start=start):
            _, _, adapted = adapter_forward(ex.snippets, ckpt.adapter)
            z = adapted @ ckpt.detector.w + ckpt.detector.b
            pooled = lse_pool(z, ckpt.gamma) if mode == "mil" else float(z[0])
            probs[i] = sigmoid(pooled)
    return probs


def train(config: TrainConfig, records: Sequence[ClipRecord],
          encoder: EncoderHandle,
          val_records: Sequence[ClipRecord] | None = None) -> TrainResult:
    """Run the optimization loop; deterministic for a fixed config and data.

    Splits off a stratified validation set unless one is supplied, trains for
    the configured number of epochs, and records one loss breakdown plus
    validation AUC per epoch.
    """
    from .evalkit import ScoredSet, roc_auc  # local import, no module cycle

    if not records:
        raise ValidationError("empty dataset")
    warnings: List[str] = []
    if val_records is None:
        train_recs, val_recs, warnings = split_dataset(
            records, config.split_fraction, config.seed)
    else:
        train_recs, val_recs = list(records), list(val_records)
    labels = {r.label for r in train_recs}
    if labels != {0, 1}:
        raise ValidationError("training split must contain both classes")

    hash_before = encoder.state_hash()
    pos_weight = _resolve_pos_weight(config, train_recs)
    examples = prepare_examples(train_recs, encoder, config)
    val_examples = prepare_examples(val_recs, encoder, config) if val_recs else []
    val_labels = np.asarray([r.label for r in val_recs], dtype=np.int64)

    ckpt = init_checkpoint(dim=encoder.dim, hidden=config.hidden_dim,
                           gamma=config.gamma, seed=config.seed,
                           zero_first_layer=config.zero_first_layer)
    theta = _theta_from_ckpt(ckpt)
    adam = AdamState(theta)
    history: List[EpochStats] = []
    n = len(examples)

    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 1000 + epoch])
        order = rng.permutation(n)
        sim_total = 0.0
        cls_total = 0.0
        for bi, start in enumerate(range(0, n, config.train_batch)):
            idx = order[start:start + config.train_batch]
            batch = [examples[j] for j in idx]
            unmatched = None
            if config.mode == "clip":
                # one caption per example, drawn uniformly from the others
                unmatched = [examples[(j + 1 + int(rng.integers(0, n - 1))) % n].text
                             if n > 1 else examples[j].text
                             for j in idx]
            current = _ckpt_from_theta(theta, ckpt)
            try:
                breakdown, grads = batch_objective(current, batch, config.mode,
                                                   pos_weight, unmatched)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(
                    f"epoch {epoch}, batch {bi}: {exc}") from exc
            if not np.isfinite(breakdown.l_total):
                raise NonFiniteLossError(
                    f"epoch {epoch}, batch {bi}: non-finite total loss")
            adam.step(theta, grads, config.learning_rate, config.weight_decay)
            sim_total += breakdown.l_sim * len(batch)
            cls_total += breakdown.l_cls * len(batch)
        epoch_ckpt = _ckpt_from_theta(theta, ckpt)
        epoch_ckpt.epoch = epoch + 1
        stats = LossBreakdown.compute(sim_total / n, cls_total / n,
                                      epoch_ckpt.s_sim, epoch_ckpt.s_cls)
        val_auc = float("nan")
        if val_examples and {0, 1} == set(val_labels.tolist()):
            probs = scores_for(epoch_ckpt, val_examples, config.mode,
                               config.eval_batch)
            val_auc = roc_auc(ScoredSet(probs, val_labels))
        history.append(EpochStats(epoch + 1, stats, val_auc))

    final = _ckpt_from_theta(theta, ckpt)
    final.epoch = config.epochs
    if encoder.state_hash() != hash_before:
        raise ValidationError("encoder state changed during training")
    return TrainResult(final, history, warnings)


def write_history_csv(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_sim", "L_cls", "s_sim", "s_cls",
                         "L_total", "val_auc"])
        for row in history:
            b = row.breakdown
            writer.writerow([row.epoch, repr(b.l_sim), repr(b.l_cls),
                             repr(b.s_sim), repr(b.s_cls), repr(b.l_total),
                             repr(row.val_auc)])
