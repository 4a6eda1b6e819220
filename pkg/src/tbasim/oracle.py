"""Decoder stand-in and the learnable confidence head.

``decode`` turns ground truth into query predictions: a track query bound to an
object re-detects it, any other query reports the nearest visible object within
its capture radius (or background). Confidence comes either from a hand-set
evidence heuristic, where ``suppression_strength`` damps queries that see an
object already owned by a track query, or from a logistic model over five
context features trained on assignment labels.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .assignment import Prediction
from .errors import DataError, ParameterError
from .lifecycle import EpisodeRecord, QueryGroup, QueryKind, QueryState
from .rng import SHUFFLE_STREAM, substream
from .world import BoxBEV, Frame

FEATURE_NAMES = (
    "is_track_query",
    "age_normalized",
    "dist_to_nearest_gt_normalized",
    "same_gt_track_query_present",
    "evidence_strength",
)
NUM_FEATURES = len(FEATURE_NAMES)

BACKGROUND_CONFIDENCE = 0.01
_BACKGROUND_DIMS = (4.0, 2.0)


@dataclass(frozen=True)
class OracleParams:
    pos_noise_std: float = 0.3  # track queries
    proposal_noise_std: float = 0.15  # proposals see the current sweep directly
    proposal_capture_radius: float = 3.0
    suppression_strength: float = 0.8
    occluded_evidence_scale: float = 0.3
    class_confusion: float = 0.05
    class_peak: float = 0.9
    num_classes: int = 7
    feature_dist_radius: float = 4.0  # distance feature hits 1.0 here (the matching gate)
    # a track query counts as covering the same object only if its prediction is this close
    track_cue_radius: float = 0.75
    feature_age_cap: int = 10

    def validate(self) -> None:
        for name in ("suppression_strength", "occluded_evidence_scale", "class_confusion", "class_peak"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"OracleParams.{name}={v} outside [0, 1]")
        for name in ("pos_noise_std", "proposal_noise_std"):
            if getattr(self, name) < 0:
                raise ParameterError(f"OracleParams.{name} must be >= 0")
        if not (self.proposal_capture_radius > 0 and self.feature_dist_radius > 0 and self.track_cue_radius > 0):
            raise ParameterError("OracleParams radii must be > 0")
        if self.num_classes < 1 or self.feature_age_cap < 1:
            raise ParameterError("OracleParams.num_classes and feature_age_cap must be >= 1")


@dataclass
class ConfidenceModel:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(NUM_FEATURES))
    bias: float = 0.0
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.shape != (NUM_FEATURES,):
            raise DataError(f"ConfidenceModel needs {NUM_FEATURES} weights, got {self.weights.shape}")
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise DataError("ConfidenceModel parameters must be finite")

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceModel":
        return cls(np.asarray(d["weights"], dtype=float), float(d["bias"]), tuple(d["feature_names"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class LabeledExample:
    features: tuple[float, ...]
    label: int


def class_scores(true_class: int, params: OracleParams, rng) -> tuple[float, ...]:
    k = params.num_classes
    if k == 1:
        return (1.0,)
    peak_at = true_class % k
    if params.class_confusion > 0 and rng.random() < params.class_confusion:
        peak_at = (peak_at + 1 + int(rng.integers(k - 1))) % k
    rest = (1.0 - params.class_peak) / (k - 1)
    scores = [rest] * k
    scores[peak_at] = params.class_peak
    return tuple(scores)


@functools.lru_cache(maxsize=65536)
def _background_at(anchor: tuple[float, float], k: int) -> Prediction:
    return Prediction(
        BoxBEV(anchor[0], anchor[1], *_BACKGROUND_DIMS),
        tuple([1.0 / k] * k),
        BACKGROUND_CONFIDENCE,
        evidence=0.0,
        captured_gt=None,
    )


def _background(anchor, params: OracleParams) -> Prediction:
    return _background_at((float(anchor[0]), float(anchor[1])), params.num_classes)


def observe(query: QueryState, frame: Frame, params: OracleParams, rng) -> Prediction:
    """Box, class scores and evidence for one query; confidence is filled in later."""
    objs = frame.by_track_id()
    if query.kind is QueryKind.TRACK and query.prior_gt in objs:
        obj = objs[query.prior_gt]
        evidence = 1.0 if obj.visible else params.occluded_evidence_scale
        std = params.pos_noise_std
    else:
        ax, ay = query.anchor
        best, best_d = None, math.inf
        for o in frame.objects:
            if not o.visible:
                continue
            d = math.hypot(o.box.cx - ax, o.box.cy - ay)
            if d <= params.proposal_capture_radius and (d < best_d or (d == best_d and o.track_id < best.track_id)):
                best, best_d = o, d
        if best is None:
            return _background(query.anchor, params)
        obj = best
        evidence = 1.0 - 0.5 * best_d / params.proposal_capture_radius
        std = params.proposal_noise_std if query.kind is QueryKind.PROPOSAL else params.pos_noise_std
    noise = rng.normal(0.0, std, size=2) if std > 0 else (0.0, 0.0)
    box = BoxBEV(obj.box.cx + float(noise[0]), obj.box.cy + float(noise[1]), obj.box.length, obj.box.width, obj.box.yaw)
    return Prediction(box, class_scores(obj.class_id, params, rng), evidence, evidence=evidence, captured_gt=obj.track_id)


def _owners(queries: Sequence[QueryState], frame: Frame) -> dict[int, list[int]]:
    """gt id -> ids of track queries bound to it (object present in the frame)."""
    present = frame.by_track_id()
    out: dict[int, list[int]] = {}
    for q in queries:
        if q.kind is QueryKind.TRACK and q.prior_gt is not None and q.prior_gt in present:
            out.setdefault(q.prior_gt, []).append(q.query_id)
    return out


def _suppressed(q: QueryState, owners: dict[int, list[int]]) -> bool:
    """Heuristic mode: another track query is bound to the object this query sees."""
    g = q.prediction.captured_gt
    return g is not None and any(o != q.query_id for o in owners.get(g, ()))


def _track_cue(q: QueryState, queries: Sequence[QueryState], radius: float) -> float:
    """1.0 if another track query predicts the same object within ``radius`` of this prediction.

    This is what the decoder can perceive through self-attention: a track query
    sitting on the same object, not which object that query is labeled with. A
    noisy track prediction can therefore hide a covering track query.
    """
    p = q.prediction
    if p is None or p.captured_gt is None:
        return 0.0
    for o in queries:
        if o.query_id == q.query_id or o.kind is not QueryKind.TRACK or o.prediction is None:
            continue
        op = o.prediction
        if op.captured_gt == p.captured_gt and math.hypot(op.box.cx - p.box.cx, op.box.cy - p.box.cy) <= radius:
            return 1.0
    return 0.0


def features(query: QueryState, group: QueryGroup, frame: Frame, params: OracleParams = OracleParams()) -> list[float]:
    """The five confidence features of one decoded query, each in [0, 1]."""
    return _features(query, group.queries, frame, params)


def _features(query, queries, frame, params) -> list[float]:
    pred = query.prediction
    if pred is None:
        raise DataError(f"query {query.query_id} has no prediction to featurize")
    is_track = 1.0 if query.kind is QueryKind.TRACK else 0.0
    age = min(query.age, params.feature_age_cap) / params.feature_age_cap
    if frame.objects:
        d = min(math.hypot(pred.box.cx - o.box.cx, pred.box.cy - o.box.cy) for o in frame.objects)
        dist = min(d / params.feature_dist_radius, 1.0)
    else:
        dist = 1.0
    return [is_track, age, dist, _track_cue(query, queries, params.track_cue_radius), float(pred.evidence)]


def predict_confidence(model: ConfidenceModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (NUM_FEATURES,):
        raise DataError(f"expected {NUM_FEATURES} features, got shape {x.shape}")
    z = float(model.weights @ x + model.bias)
    # keep the output strictly inside (0, 1)
    return float(expit(min(max(z, -34.0), 34.0)))


def decode(
    group: QueryGroup,
    frame: Frame,
    params: OracleParams,
    model: ConfidenceModel | None = None,
    rng=None,
) -> QueryGroup:
    """Fill predictions and confidences for every query in the group.

    Proposals that already hold a prediction (from the detection stage of this
    frame) keep their box; track queries are always re-observed.
    """
    if rng is None:
        rng = substream(0, frame.index)
    observed = []
    for q in group.queries:
        if q.kind is QueryKind.PROPOSAL and q.prediction is not None:
            observed.append(q)
        else:
            observed.append(replace(q, prediction=observe(q, frame, params, rng)))
    owners = _owners(observed, frame)
    out = []
    for q in observed:
        pred = q.prediction
        if model is not None:
            conf = predict_confidence(model, _features(q, observed, frame, params))
        elif pred.captured_gt is None:
            conf = BACKGROUND_CONFIDENCE
        else:
            conf = pred.evidence
            if _suppressed(q, owners):
                conf *= 1.0 - params.suppression_strength
        if conf != pred.confidence:
            q = replace(q, prediction=replace(pred, confidence=conf))
        out.append(q)
    return QueryGroup(group.group_id, out, is_main=group.is_main)


def group_features(group: QueryGroup, frame: Frame, params: OracleParams) -> list[list[float]]:
    return [_features(q, group.queries, frame, params) for q in group.queries]


# --- training -------------------------------------------------------------------------------

def _as_arrays(batch: Sequence[LabeledExample]):
    X = np.asarray([e.features for e in batch], dtype=float)
    y = np.asarray([e.label for e in batch], dtype=float)
    return X, y


def bce_loss(weights, bias, X, y, pos_weight: float = 1.0) -> float:
    z = X @ weights + bias
    sw = np.where(y > 0.5, pos_weight, 1.0)
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    losses = y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    return float(np.mean(sw * losses))


def bce_gradient(weights, bias, X, y, pos_weight: float = 1.0):
    z = X @ weights + bias
    sw = np.where(y > 0.5, pos_weight, 1.0)
    r = sw * (expit(z) - y)
    return X.T @ r / len(y), float(np.mean(r))


def sgd_step(model: ConfidenceModel, batch: Sequence[LabeledExample], lr: float, pos_weight: float = 1.0):
    """One gradient step on mean binary cross-entropy; returns (new model, pre-update loss)."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    if not batch:
        raise DataError("sgd_step needs a non-empty batch")
    X, y = _as_arrays(batch)
    loss = bce_loss(model.weights, model.bias, X, y, pos_weight)
    gw, gb = bce_gradient(model.weights, model.bias, X, y, pos_weight)
    return ConfidenceModel(model.weights - lr * gw, model.bias - lr * gb, model.feature_names), loss


def examples_from_logs(episode_logs: Sequence[EpisodeRecord]) -> list[LabeledExample]:
    out = []
    for rec in episode_logs:
        if len(rec.features) != len(rec.labels):
            raise DataError(f"record (scene {rec.scene_id}, frame {rec.frame}) lacks per-query features")
        for f, (_, g) in zip(rec.features, rec.labels):
            out.append(LabeledExample(tuple(f), 0 if g is None else 1))
    return out


def fit_confidence_model(
    examples: Sequence[LabeledExample],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    pos_weight: float = 1.0,
) -> tuple[ConfidenceModel, list[float]]:
    if not examples:
        raise DataError("no labeled examples to train on")
    X, y = _as_arrays(examples)
    model = ConfidenceModel()
    curve = []
    for epoch in range(epochs):
        order = substream(seed, SHUFFLE_STREAM, epoch).permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            Xb, yb = X[idx], y[idx]
            total += bce_loss(model.weights, model.bias, Xb, yb, pos_weight) * len(idx)
            gw, gb = bce_gradient(model.weights, model.bias, Xb, yb, pos_weight)
            model = ConfidenceModel(model.weights - lr * gw, model.bias - lr * gb)
        curve.append(total / len(y))
    return model, curve


def train_confidence_model(
    episode_logs: Sequence[EpisodeRecord],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    pos_weight: float = 1.0,
) -> tuple[ConfidenceModel, list[float]]:
    """Shuffled mini-batch SGD on the (features, label) pairs found in training logs."""
    return fit_confidence_model(examples_from_logs(episode_logs), epochs, lr, seed, batch_size, pos_weight)
