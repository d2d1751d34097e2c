"""Detection metrics, driving-benchmark scoring, and route-paired
significance testing.

AUC uses the Mann-Whitney rank form with midrank tie handling and is
cross-checkable against trapezoidal ROC integration (both are implemented).
The Wilcoxon signed-rank p-value is exact (full sign enumeration over all
2^n assignments) up to n = 20 effective pairs and switches to the normal
approximation above that.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Tuple

import numpy as np

from .errors import ValidationError

# Severity coefficients of the additive-denominator penalty (v2.1):
# pedestrian 1.0, vehicle 0.70, static-layout 0.60.
DEFAULT_V21_COEFFICIENTS = {
    "pedestrian": 1.0,
    "vehicle": 0.70,
    "layout": 0.60,
    "static": 0.60,
}
COLLISION_TYPES = frozenset({"pedestrian", "vehicle", "layout", "static"})

EXACT_WILCOXON_MAX_N = 20


@dataclass
class ScoredSet:
    """Parallel score/label lists for threshold metrics and AUC."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 1 or self.scores.shape != self.labels.shape:
            raise ValidationError("scores and labels must be equal-length 1-D")
        if self.scores.size < 1:
            raise ValidationError("scored set must be non-empty")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("scores must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be 0 or 1")

    def require_both_classes(self) -> None:
        if len(set(self.labels.tolist())) < 2:
            raise ValidationError("both classes must be present")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank run."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scored: ScoredSet) -> float:
    """Threshold-independent ranking quality; ties contribute one half."""
    scored.require_both_classes()
    ranks = _midranks(scored.scores)
    pos = scored.labels == 1
    n_pos = int(pos.sum())
    n_neg = scored.labels.size - n_pos
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scored: ScoredSet) -> Tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) points swept over the distinct scores, high to low."""
    scored.require_both_classes()
    n_pos = int((scored.labels == 1).sum())
    n_neg = scored.labels.size - n_pos
    fpr, tpr = [0.0], [0.0]
    for tau in np.unique(scored.scores)[::-1]:
        preds = scored.scores >= tau
        tpr.append(float((preds & (scored.labels == 1)).sum()) / n_pos)
        fpr.append(float((preds & (scored.labels == 0)).sum()) / n_neg)
    return np.asarray(fpr), np.asarray(tpr)


def roc_auc_trapezoid(scored: ScoredSet) -> float:
    """Trapezoidal area under the ROC curve; equals ``roc_auc`` exactly."""
    fpr, tpr = roc_curve(scored)
    return float(np.trapezoid(tpr, fpr))


class YoudenResult(NamedTuple):
    threshold: float
    j_statistic: float
    degenerate: bool  # no candidate beats J = 0


def youden_threshold(validation: ScoredSet) -> YoudenResult:
    """Threshold maximizing J = TPR - FPR over all candidate cuts.

    Candidates are midpoints of adjacent distinct sorted scores plus one
    sentinel below the minimum and one above the maximum; classification is
    score >= threshold.  Among maximizers the smallest threshold wins.
    """
    validation.require_both_classes()
    distinct = np.unique(validation.scores)
    candidates = np.concatenate([
        [distinct[0] - 1.0],
        (distinct[:-1] + distinct[1:]) / 2.0,
        [distinct[-1] + 1.0],
    ])
    pos = validation.labels == 1
    n_pos = int(pos.sum())
    n_neg = validation.labels.size - n_pos
    preds = validation.scores[None, :] >= candidates[:, None]
    tpr = (preds & pos[None, :]).sum(axis=1) / n_pos
    fpr = (preds & ~pos[None, :]).sum(axis=1) / n_neg
    j = tpr - fpr
    best = int(np.argmax(j))  # first max = smallest candidate
    return YoudenResult(float(candidates[best]), float(j[best]),
                        bool(j[best] <= 0.0))


def threshold_metrics(scored: ScoredSet, tau: float) -> Dict[str, float]:
    """Confusion-matrix metrics at one threshold (score >= tau is positive).

    F1 is 0 by convention whenever its denominator vanishes.
    """
    preds = scored.scores >= tau
    actual = scored.labels == 1
    tp = int((preds & actual).sum())
    fp = int((preds & ~actual).sum())
    fn = int((~preds & actual).sum())
    tn = int((~preds & ~actual).sum())
    f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return {
        "f1": f1,
        "accuracy": (tp + tn) / scored.labels.size,
        "tpr": tp / (tp + fn) if (tp + fn) else 0.0,
        "fpr": fp / (fp + tn) if (fp + tn) else 0.0,
    }


@dataclass
class DrivingRunRecord:
    """Per-route closed-loop outcome: completion, distance, infractions."""

    route_id: str
    km: float
    route_completion: float  # percent, 0..100
    infractions: Dict[str, int] = field(default_factory=dict)
    coefficients: Dict[str, float] | None = None  # v2.1 c_j
    penalty_weights: Dict[str, float] | None = None  # v2.0 p_j

    def __post_init__(self):
        if self.km < 0:
            raise ValidationError("km must be >= 0")
        if not (0.0 <= self.route_completion <= 100.0):
            raise ValidationError("route_completion must be in [0, 100]")
        for kind, count in self.infractions.items():
            if count < 0:
                raise ValidationError(f"negative count for infraction {kind!r}")


def infraction_penalty(counts: Mapping[str, int], params: Mapping[str, float],
                       version: str = "v21") -> float:
    """Penalty factor in (0, 1] for a route's infraction counts.

    v2.0 multiplies per-type weights p_j in (0, 1] once per occurrence;
    v2.1 uses the additive denominator 1 / (1 + sum_j c_j * n_j).  Zero
    infractions give exactly 1.0 under both.
    """
    for kind, count in counts.items():
        if count < 0:
            raise ValidationError(f"negative count for infraction {kind!r}")
        if kind not in params:
            raise ValidationError(
                f"no {version} parameter supplied for infraction type {kind!r}")
    if version == "v20":
        penalty = 1.0
        for kind, count in counts.items():
            p = params[kind]
            if not (0.0 < p <= 1.0):
                raise ValidationError(f"v2.0 weight for {kind!r} must be in (0, 1]")
            penalty *= p ** count
        return penalty
    if version == "v21":
        total = 0.0
        for kind, count in counts.items():
            c = params[kind]
            if c < 0:
                raise ValidationError(f"v2.1 coefficient for {kind!r} must be >= 0")
            total += c * count
        return 1.0 / (1.0 + total)
    raise ValidationError(f"unknown scoring version {version!r}")


def summarize_run(record: DrivingRunRecord, version: str = "v21",
                  params: Mapping[str, float] | None = None) -> Dict[str, float]:
    """Route summary {RC, IS, DS, Col_per_km}; DS = RC x penalty.

    Parameter resolution: explicit ``params``, then the record's own
    coefficients/weights, then (v2.1 only) the default severity table.
    """
    if params is None:
        params = (record.coefficients if version == "v21"
                  else record.penalty_weights)
    if params is None:
        if version == "v21":
            params = DEFAULT_V21_COEFFICIENTS
        else:
            raise ValidationError("v2.0 scoring requires explicit penalty weights")
    penalty = infraction_penalty(record.infractions, params, version)
    collisions = sum(c for k, c in record.infractions.items()
                     if k in COLLISION_TYPES)
    if record.km == 0:
        if collisions:
            raise ValidationError("km = 0 with nonzero collision counts")
        col_per_km = 0.0
    else:
        col_per_km = collisions / record.km
    return {
        "RC": record.route_completion,
        "IS": penalty,
        "DS": record.route_completion * penalty,
        "Col_per_km": col_per_km,
    }


def read_run_records(path) -> List[DrivingRunRecord]:
    """Run records as JSON Lines matching the DrivingRunRecord fields."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(DrivingRunRecord(
                    route_id=obj["route_id"], km=obj["km"],
                    route_completion=obj["route_completion"],
                    infractions={k: int(v) for k, v in
                                 obj.get("infractions", {}).items()},
                    coefficients=obj.get("coefficients"),
                    penalty_weights=obj.get("penalty_weights")))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValidationError(f"run record line {lineno}: {exc}") from exc
    return records


@dataclass
class WilcoxonResult:
    """One-sided signed-rank outcome."""

    statistic: float  # W: rank sum of positive differences
    n_effective: int  # pairs remaining after zero-dropping
    p_one_sided: float
    method: str  # "exact" | "normal" | "normal_cc"

    def __post_init__(self):
        upper = self.n_effective * (self.n_effective + 1) / 2.0
        if not (0.0 <= self.statistic <= upper):
            raise ValidationError(
                f"W = {self.statistic} outside [0, {upper}] for n = {self.n_effective}")


def _exact_tail_probability(ranks: np.ndarray, w_observed: float) -> float:
    """P(W >= w) under the null, by enumerating all 2^n sign assignments.

    Ranks are doubled to integers (midranks are half-integer) and the two
    half-subsets' sums are combined pairwise, which materializes every
    assignment's rank sum without a Python-level 2^n loop.
    """
    scaled = np.asarray(np.rint(2.0 * ranks), dtype=np.int64)
    half = scaled.size // 2

    def subset_sums(values: np.ndarray) -> np.ndarray:
        sums = np.zeros(1, dtype=np.int64)
        for v in values:
            sums = np.concatenate([sums, sums + v])
        return sums

    left = subset_sums(scaled[:half])
    right = np.sort(subset_sums(scaled[half:]))
    target = int(np.rint(2.0 * w_observed))
    # for each left sum, count right sums with left + right >= target
    first_ge = np.searchsorted(right, target - left, side="left")
    count = int((right.size - first_ge).sum())
    return count / float(2 ** scaled.size)


def wilcoxon_signed_rank(deltas, continuity: bool = False) -> WilcoxonResult:
    """One-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped; absolute values are midranked on ties; the
    statistic W is the rank sum of the positive differences.  The one-sided
    p-value is P(W_null >= W): exact by full sign enumeration when the
    effective sample size is at most 20, otherwise a normal approximation
    with tie-corrected variance (``continuity`` adds the 0.5 correction).

    Parameters
    ----------
    deltas : array_like
        Paired differences (e.g. per-route score deltas between two systems).
    continuity : bool
        Apply the continuity correction in the normal-approximation branch.

    Returns
    -------
    WilcoxonResult
        W, effective n, one-sided p, and the method used.
    """
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim != 1:
        raise ValidationError("deltas must be 1-D")
    if not np.all(np.isfinite(d)):
        raise ValidationError("deltas must be finite")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValidationError("all deltas are zero; no effective pairs")
    ranks = _midranks(np.abs(d))
    w = float(ranks[d > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        return WilcoxonResult(w, n, _exact_tail_probability(ranks, w), "exact")

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    shift = 0.5 if continuity else 0.0
    zscore = (w - mu - shift) / math.sqrt(var)
    p = 0.5 * math.erfc(zscore / math.sqrt(2.0))
    return WilcoxonResult(w, n, p, "normal_cc" if continuity else "normal")
