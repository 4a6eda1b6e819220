"""nuScenes-style tracking metrics: CLEAR-MOT per recall threshold, AMOTA/AMOTP, plus
query-level statistics read from episode logs (TQ recall, newborn/tracked confidence)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .errors import DataError
from .lifecycle import EpisodeRecord, QueryKind
from .world import BoxBEV, GtObject


@dataclass(frozen=True)
class TrackedOutput:
    frame: int
    pred_track_id: int
    box: BoxBEV
    class_id: int
    confidence: float


@dataclass
class MotAccumulator:
    recall_threshold: float
    match_dist_sum: float = 0.0
    match_count: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    gt_count: int = 0


@dataclass
class MetricsReport:
    amota: float = 0.0
    amotp: float = 0.0
    mota_r_curve: list[tuple[float, float]] = field(default_factory=list)
    fp: int = 0
    fn: int = 0
    ids: int = 0
    tq_recall: float | None = None
    nb_conf_mean: float | None = None
    trk_conf_mean: float | None = None
    seed: int | None = None
    config_hash: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mota_r_curve"] = [list(p) for p in self.mota_r_curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["mota_r_curve"] = [tuple(p) for p in d.get("mota_r_curve", [])]
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    CSV_COLUMNS = ("amota", "amotp", "fp", "fn", "ids", "tq_recall", "nb_conf", "trk_conf", "seed", "config_hash")

    def csv_row(self) -> list:
        return [self.amota, self.amotp, self.fp, self.fn, self.ids, _blank(self.tq_recall),
                _blank(self.nb_conf_mean), _blank(self.trk_conf_mean), _blank(self.seed), self.config_hash]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _blank(v):
    return "" if v is None else v


def match_frame(preds: Sequence[TrackedOutput], gts: Sequence[GtObject], dist_threshold_m: float = 2.0):
    """Greedy center-distance matching in descending confidence order.

    Returns (matches, fp_list, fn_list) with matches as (pred, gt, distance).
    """
    order = sorted(preds, key=lambda p: (-p.confidence, p.pred_track_id))
    free = sorted(gts, key=lambda g: g.track_id)
    matches, fps = [], []
    for p in order:
        best, best_d = None, math.inf
        for g in free:
            d = math.hypot(p.box.cx - g.box.cx, p.box.cy - g.box.cy)
            if d <= dist_threshold_m and d < best_d:
                best, best_d = g, d
        if best is None:
            fps.append(p)
        else:
            free.remove(best)
            matches.append((p, best, best_d))
    return matches, fps, free


def _group_by_frame(outputs: Sequence[TrackedOutput]) -> dict[int, list[TrackedOutput]]:
    out: dict[int, list[TrackedOutput]] = {}
    for o in outputs:
        out.setdefault(o.frame, []).append(o)
    return out


def accumulate_clearmot(
    scene_outputs: Sequence[TrackedOutput],
    scene_gt: Mapping[int, Sequence[GtObject]],
    r: float,
    dist_threshold_m: float = 2.0,
    score_threshold: float = -math.inf,
) -> MotAccumulator:
    """CLEAR-MOT counts over a scene for outputs with confidence >= score_threshold.

    ``scene_gt`` maps frame index -> ground-truth objects. An identity switch is
    counted when an object is matched to a different output id than at its most
    recent matched frame.
    """
    acc = MotAccumulator(recall_threshold=r)
    by_frame = _group_by_frame([o for o in scene_outputs if o.confidence >= score_threshold])
    last_id: dict[int, int] = {}
    for t in sorted(set(scene_gt) | set(by_frame)):
        gts = scene_gt.get(t, ())
        matches, fps, fns = match_frame(by_frame.get(t, ()), gts, dist_threshold_m)
        acc.gt_count += len(gts)
        acc.fp += len(fps)
        acc.fn += len(fns)
        for p, g, d in matches:
            acc.match_count += 1
            acc.match_dist_sum += d
            prev = last_id.get(g.track_id)
            if prev is not None and prev != p.pred_track_id:
                acc.ids += 1
            last_id[g.track_id] = p.pred_track_id
    return acc


def motar(acc: MotAccumulator) -> float | None:
    """Recall-normalized MOTA clamped to [0, 1]; None when the threshold is undefined."""
    P, r = acc.gt_count, acc.recall_threshold
    if P <= 0 or r <= 0:
        return None
    value = 1.0 - (acc.ids + acc.fp + acc.fn - (1.0 - r) * P) / (r * P)
    return min(1.0, max(0.0, value))


def recall_thresholds(num_thresholds: int) -> list[float]:
    return [i / num_thresholds for i in range(1, num_thresholds + 1)]


def score_thresholds(
    scene_outputs, scene_gt, recalls: Sequence[float], dist_threshold_m: float = 2.0
) -> list[float | None]:
    """Per recall level, the highest confidence cut whose true positives reach that recall.

    True positives come from matching the unfiltered outputs; None marks an
    unachievable recall.
    """
    tp_conf = []
    by_frame = _group_by_frame(scene_outputs)
    total = 0
    for t, gts in scene_gt.items():
        total += len(gts)
        matches, _, _ = match_frame(by_frame.get(t, ()), gts, dist_threshold_m)
        tp_conf.extend(p.confidence for p, _, _ in matches)
    tp_conf.sort(reverse=True)
    out = []
    for r in recalls:
        need = math.ceil(r * total - 1e-9)
        out.append(tp_conf[need - 1] if 0 < need <= len(tp_conf) else None)
    return out


def amota_amotp(
    scene_outputs: Sequence[TrackedOutput],
    scene_gt: Mapping[int, Sequence[GtObject]],
    num_thresholds: int = 40,
    dist_threshold_m: float = 2.0,
):
    """(amota, amotp, curve, best accumulator).

    Unreached recall levels count MOTAR 0 and match distance ``dist_threshold_m``.
    The returned accumulator is the one at the best MOTAR, highest recall on ties;
    FP/FN/IDS are reported there.
    """
    if num_thresholds < 2:
        raise DataError(f"num_thresholds must be >= 2, got {num_thresholds}")
    if sum(len(g) for g in scene_gt.values()) == 0:
        raise DataError("no ground truth objects to evaluate against")
    recalls = recall_thresholds(num_thresholds)
    cuts = score_thresholds(scene_outputs, scene_gt, recalls, dist_threshold_m)
    curve, motps = [], []
    best_acc, best_val = None, -1.0
    for r, cut in zip(recalls, cuts):
        if cut is None:
            curve.append((r, 0.0))
            motps.append(dist_threshold_m)
            continue
        acc = accumulate_clearmot(scene_outputs, scene_gt, r, dist_threshold_m, score_threshold=cut)
        m = motar(acc)
        m = 0.0 if m is None else m
        curve.append((r, m))
        motps.append(acc.match_dist_sum / acc.match_count if acc.match_count else dist_threshold_m)
        if m >= best_val:  # ties go to the higher recall
            best_acc, best_val = acc, m
    if best_acc is None:
        # nothing reachable: report the raw counts of the unfiltered outputs
        best_acc = accumulate_clearmot(scene_outputs, scene_gt, recalls[0], dist_threshold_m)
    amota = sum(m for _, m in curve) / len(curve)
    amotp = sum(motps) / len(motps)
    return amota, amotp, curve, best_acc


def multiclass_amota_amotp(scene_outputs, scene_gt, num_thresholds: int = 40, dist_threshold_m: float = 2.0):
    """Per-class AMOTA/AMOTP averaged uniformly over classes that have ground truth."""
    classes = sorted({g.class_id for gts in scene_gt.values() for g in gts})
    if not classes:
        raise DataError("no ground truth objects to evaluate against")
    amotas, amotps = [], []
    for c in classes:
        outs = [o for o in scene_outputs if o.class_id == c]
        gts = {t: [g for g in v if g.class_id == c] for t, v in scene_gt.items()}
        a, p, _, _ = amota_amotp(outs, gts, num_thresholds, dist_threshold_m)
        amotas.append(a)
        amotps.append(p)
    return sum(amotas) / len(amotas), sum(amotps) / len(amotps)


def tq_recall(episode_logs: Sequence[EpisodeRecord]) -> float | None:
    """Share of already-tracked objects whose assignment went to a track query.

    None when no tracked object was assigned at all.
    """
    hits = total = 0
    for rec in episode_logs:
        tracked = set(rec.tracked_ids)
        kind = {q.query_id: q.kind for q in rec.queries}
        for q, g, _ in rec.assignment.pairs:
            if g in tracked:
                total += 1
                hits += kind[q] is QueryKind.TRACK
    return hits / total if total else None


def confidence_stats(
    episode_logs: Sequence[EpisodeRecord], dist_threshold_m: float = 2.0
) -> tuple[float | None, float | None]:
    """Mean confidence of true-positive predictions on newborn vs previously tracked objects.

    Each record's queries are matched to its ground-truth objects with ``match_frame``;
    a match on an object in ``newborn_ids`` (first seen after the episode start)
    counts as newborn, one on an object in ``tracked_ids`` as tracked.
    """
    nb, trk = [], []
    for rec in episode_logs:
        preds = []
        for q in rec.queries:
            if q.prediction is not None:
                preds.append(TrackedOutput(rec.frame, q.query_id, q.prediction.box, 0, q.prediction.confidence))
        matches, _, _ = match_frame(preds, rec.gt_objects, dist_threshold_m)
        newborn, tracked = set(rec.newborn_ids), set(rec.tracked_ids)
        for p, g, _ in matches:
            if g.track_id in newborn:
                nb.append(p.confidence)
            elif g.track_id in tracked:
                trk.append(p.confidence)
    mean = lambda xs: sum(xs) / len(xs) if xs else None  # noqa: E731
    return mean(nb), mean(trk)


def positive_label_rates(episode_logs: Sequence[EpisodeRecord]) -> dict[str, float | None]:
    """Fraction of positively labeled queries per query kind."""
    pos = {k.value: 0 for k in QueryKind}
    tot = {k.value: 0 for k in QueryKind}
    for rec in episode_logs:
        kind = {q.query_id: q.kind.value for q in rec.queries}
        for q, g in rec.labels:
            tot[kind[q]] += 1
            pos[kind[q]] += g is not None
    return {k: (pos[k] / tot[k] if tot[k] else None) for k in tot}
