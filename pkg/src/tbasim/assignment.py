"""Matching costs, optimal bipartite matching and ground-truth assignment strategies.

Three strategies share one two-stage skeleton:

* ``baseline_assign``: track queries keep the object they are bound to
  (stage 1, by identity); the remaining objects are matched to proposal
  queries only (stage 2).
* ``second_chance_assign``: as baseline, but track queries left without an
  object after stage 1 join the proposal queries in stage 2.
* ``detection_assign``: no identity stage; every query competes for every
  object in a single matching (detector-style supervision).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from .world import BoxBEV, Frame, GtObject


class Stage(str, enum.Enum):
    CONTINUATION = "Continuation"
    FIRST_STAGE = "FirstStage"
    SECOND_CHANCE = "SecondChance"


@dataclass(frozen=True)
class Prediction:
    box: BoxBEV
    class_scores: tuple[float, ...]
    confidence: float
    # oracle bookkeeping: how much sensor evidence backed the prediction and which object it saw
    evidence: float = 0.0
    captured_gt: int | None = None

    def __post_init__(self):
        s = math.fsum(self.class_scores)
        if abs(s - 1.0) > 1e-9 or any(not 0.0 <= p <= 1.0 for p in self.class_scores):
            raise DataError(f"class_scores must be a probability vector, sum={s!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class CostParams:
    w_class: float = 1.0
    w_center: float = 0.25
    gate_radius: float = 4.0
    big_m: float = 1e6


@dataclass
class AssignmentResult:
    pairs: list[tuple[int, int, Stage]] = field(default_factory=list)
    unassigned_queries: list[int] = field(default_factory=list)
    unassigned_gt: list[int] = field(default_factory=list)
    total_second_stage_cost: float = 0.0

    def gt_of(self) -> dict[int, int]:
        """query_id -> assigned gt_track_id."""
        return {q: g for q, g, _ in self.pairs}

    def to_dict(self) -> dict:
        return {
            "pairs": [[q, g, s.value] for q, g, s in self.pairs],
            "unassigned_queries": list(self.unassigned_queries),
            "unassigned_gt": list(self.unassigned_gt),
            "total_second_stage_cost": self.total_second_stage_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AssignmentResult":
        return cls(
            pairs=[(int(q), int(g), Stage(s)) for q, g, s in d["pairs"]],
            unassigned_queries=[int(q) for q in d["unassigned_queries"]],
            unassigned_gt=[int(g) for g in d["unassigned_gt"]],
            total_second_stage_cost=float(d["total_second_stage_cost"]),
        )


def _optimal_value(c: np.ndarray) -> float:
    if c.size == 0:
        return 0.0
    r, k = linear_sum_assignment(c)
    return float(c[r, k].sum())


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost matching of size min(rows, cols).

    Among optimal matchings the lexicographically smallest row-sorted pair list is
    returned, so the result is a function of the matrix alone. The optimum itself
    comes from scipy's shortest-augmenting-path solver; the tie-break fixes pairs
    one at a time, keeping a candidate only if the rest can still reach the optimum.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise DataError(f"cost must be a 2-D matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DataError("cost matrix contains NaN or infinite entries")
    n, m = c.shape
    k = min(n, m)
    if k == 0:
        return []
    best = _optimal_value(c)
    tol = 64 * np.finfo(float).eps * k * max(1.0, float(np.abs(c).max()))

    pairs: list[tuple[int, int]] = []
    free_cols = list(range(m))
    acc = 0.0
    last_row = -1
    for i in range(k):
        need = k - i - 1
        found = False
        for r in range(last_row + 1, n):
            rows_rest = np.arange(r + 1, n)
            if len(rows_rest) < need:
                break
            for col in free_cols:
                cols_rest = [x for x in free_cols if x != col]
                sub = _optimal_value(c[np.ix_(rows_rest, cols_rest)]) if need else 0.0
                if acc + c[r, col] + sub <= best + tol:
                    pairs.append((r, col))
                    acc += c[r, col]
                    free_cols.remove(col)
                    last_row = r
                    found = True
                    break
            if found:
                break
        if not found:  # pragma: no cover - the optimum is always reachable
            raise RuntimeError("tie-break search lost the optimal matching")
    return pairs


def matching_cost(cost, pairs: Iterable[tuple[int, int]]) -> float:
    c = np.asarray(cost, dtype=float)
    return float(sum(c[r, k] for r, k in sorted(pairs)))


def match_cost(pred: Prediction, gt: GtObject, cp: CostParams = CostParams()) -> float:
    d = math.hypot(pred.box.cx - gt.box.cx, pred.box.cy - gt.box.cy)
    if d > cp.gate_radius:
        return cp.big_m
    p = pred.class_scores[gt.class_id] if gt.class_id < len(pred.class_scores) else 0.0
    return cp.w_class * (1.0 - p) + cp.w_center * d


def cost_matrix(queries: Sequence, gts: Sequence[GtObject], cp: CostParams) -> np.ndarray:
    c = np.empty((len(queries), len(gts)))
    for i, q in enumerate(queries):
        for j, g in enumerate(gts):
            c[i, j] = match_cost(q.prediction, g, cp)
    return c


def _check_bindings(track_queries: Sequence) -> None:
    seen: dict[int, int] = {}
    for q in track_queries:
        if q.prior_gt is None:
            continue
        if q.prior_gt in seen:
            raise DataError(
                f"track queries {seen[q.prior_gt]} and {q.query_id} both claim gt {q.prior_gt}"
            )
        seen[q.prior_gt] = q.query_id


def _match_stage(candidates, gts, cp, stage_of):
    """Stage-2 matching: returns (pairs, matched query ids, matched gt ids, penalized cost).

    Cost counts big_m for every object left without an in-gate partner, so adding
    candidates can never raise it.
    """
    pairs = []
    if not gts:
        return pairs, set(), set(), 0.0
    c = cost_matrix(candidates, gts, cp)
    matched_q, matched_g = set(), set()
    total = 0.0
    for r, k in hungarian(c) if len(candidates) else []:
        if c[r, k] >= cp.big_m:
            continue
        q, g = candidates[r], gts[k]
        pairs.append((q.query_id, g.track_id, stage_of(q)))
        matched_q.add(q.query_id)
        matched_g.add(g.track_id)
        total += c[r, k]
    total += cp.big_m * (len(gts) - len(matched_g))
    return pairs, matched_q, matched_g, total


def _two_stage(track_queries, proposal_queries, frame: Frame, cp: CostParams, second_chance: bool):
    _check_bindings(track_queries)
    present = frame.by_track_id()
    pairs: list[tuple[int, int, Stage]] = []
    taken_gt: set[int] = set()
    leftover_tq = []
    for q in track_queries:
        if q.prior_gt is not None and q.prior_gt in present:
            pairs.append((q.query_id, q.prior_gt, Stage.CONTINUATION))
            taken_gt.add(q.prior_gt)
        else:
            leftover_tq.append(q)
    open_gt = [g for g in frame.objects if g.track_id not in taken_gt]
    candidates = list(proposal_queries) + (leftover_tq if second_chance else [])

    def stage_of(q):
        return Stage.SECOND_CHANCE if q.kind.value == "Track" else Stage.FIRST_STAGE

    stage2, matched_q, matched_g, total = _match_stage(candidates, open_gt, cp, stage_of)
    pairs.extend(stage2)
    assigned = {p[0] for p in pairs}
    all_q = list(track_queries) + list(proposal_queries)
    return AssignmentResult(
        pairs=pairs,
        unassigned_queries=[q.query_id for q in all_q if q.query_id not in assigned],
        unassigned_gt=[g.track_id for g in open_gt if g.track_id not in matched_g],
        total_second_stage_cost=total,
    )


def baseline_assign(track_queries, proposal_queries, gt_frame: Frame, cp: CostParams = CostParams()):
    return _two_stage(track_queries, proposal_queries, gt_frame, cp, second_chance=False)


def second_chance_assign(track_queries, proposal_queries, gt_frame: Frame, cp: CostParams = CostParams()):
    return _two_stage(track_queries, proposal_queries, gt_frame, cp, second_chance=True)


def detection_assign(track_queries, proposal_queries, gt_frame: Frame, cp: CostParams = CostParams()):
    """Single matching of all queries against all objects; prior bindings are ignored."""
    candidates = list(proposal_queries) + list(track_queries)
    objs = list(gt_frame.objects)
    pairs, _, matched_g, total = _match_stage(candidates, objs, cp, lambda q: Stage.FIRST_STAGE)
    assigned = {p[0] for p in pairs}
    all_q = list(track_queries) + list(proposal_queries)
    return AssignmentResult(
        pairs=pairs,
        unassigned_queries=[q.query_id for q in all_q if q.query_id not in assigned],
        unassigned_gt=[g.track_id for g in objs if g.track_id not in matched_g],
        total_second_stage_cost=total,
    )


def supervision_labels(result: AssignmentResult, all_queries) -> list[tuple[int, int | None]]:
    """(query_id, gt_track_id) for positives, (query_id, None) for negatives, in query order."""
    ids = [q.query_id for q in all_queries]
    known = set(ids)
    for q, _, _ in result.pairs:
        if q not in known:
            raise DataError(f"assigned query {q} is not among the supplied queries")
    for q in result.unassigned_queries:
        if q not in known:
            raise DataError(f"unassigned query {q} is not among the supplied queries")
    gt_of = result.gt_of()
    return [(q, gt_of.get(q)) for q in ids]
