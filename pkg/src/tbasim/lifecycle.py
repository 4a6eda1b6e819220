"""Query sets across a clip: proposal grid, top-N gating, dropout groups, propagation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .assignment import AssignmentResult, Prediction
from .errors import ParameterError, StateError
from .world import BoxBEV, GtObject


class QueryKind(str, enum.Enum):
    PROPOSAL = "Proposal"
    TRACK = "Track"


@dataclass(frozen=True)
class QueryState:
    query_id: int
    kind: QueryKind
    prediction: Prediction | None = None
    prior_gt: int | None = None
    age: int = 0
    origin_frame: int = 0
    # where the query looks: grid point for proposals, last predicted center for tracks
    anchor: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind is QueryKind.PROPOSAL and (self.prior_gt is not None or self.age != 0):
            raise ParameterError(f"proposal {self.query_id} cannot carry a binding or age")
        if self.kind is QueryKind.TRACK and self.age < 1:
            raise ParameterError(f"track query {self.query_id} needs age >= 1")

    @property
    def confidence(self) -> float:
        return 0.0 if self.prediction is None else self.prediction.confidence

    def to_dict(self) -> dict:
        p = self.prediction
        return {
            "query_id": self.query_id,
            "kind": self.kind.value,
            "prior_gt": self.prior_gt,
            "age": self.age,
            "origin_frame": self.origin_frame,
            "anchor": list(self.anchor),
            "prediction": None
            if p is None
            else {
                "cx": p.box.cx,
                "cy": p.box.cy,
                "length": p.box.length,
                "width": p.box.width,
                "yaw": p.box.yaw,
                "class_scores": list(p.class_scores),
                "confidence": p.confidence,
                "evidence": p.evidence,
                "captured_gt": p.captured_gt,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryState":
        p = d.get("prediction")
        pred = None
        if p is not None:
            pred = Prediction(
                BoxBEV(p["cx"], p["cy"], p["length"], p["width"], p["yaw"]),
                tuple(p["class_scores"]),
                p["confidence"],
                p.get("evidence", 0.0),
                p.get("captured_gt"),
            )
        return cls(
            query_id=int(d["query_id"]),
            kind=QueryKind(d["kind"]),
            prediction=pred,
            prior_gt=d["prior_gt"],
            age=int(d["age"]),
            origin_frame=int(d["origin_frame"]),
            anchor=tuple(d["anchor"]),
        )


@dataclass
class QueryGroup:
    group_id: int
    queries: list[QueryState] = field(default_factory=list)
    is_main: bool = False

    def __post_init__(self):
        ids = [q.query_id for q in self.queries]
        if len(ids) != len(set(ids)):
            raise ParameterError(f"duplicate query ids in group {self.group_id}")


@dataclass(frozen=True)
class LifecycleConfig:
    # full-scale reference: n_pq=300, n_tq=600, one auxiliary group, dropout off after 52,500/70,000 steps.
    # n_tq=12 leaves headroom over the ~6 objects per frame so newborn detections survive propagation.
    n_pq: int = 8
    n_tq: int = 12
    num_aux_groups: int = 1
    dropout_disable_after_frac: float = 0.75
    proposal_grid_spacing: float = 4.0

    def validate(self) -> None:
        if self.n_pq < 1 or self.n_tq < 1:
            raise ParameterError("LifecycleConfig.n_pq and n_tq must be >= 1")
        if self.num_aux_groups < 0:
            raise ParameterError("LifecycleConfig.num_aux_groups must be >= 0")
        if not 0.0 <= self.dropout_disable_after_frac <= 1.0:
            raise ParameterError("LifecycleConfig.dropout_disable_after_frac must be in [0, 1]")
        if not self.proposal_grid_spacing > 0:
            raise ParameterError("LifecycleConfig.proposal_grid_spacing must be > 0")


def grid_points(half_extent: float, spacing: float) -> list[tuple[float, float]]:
    if not spacing > 0:
        raise ParameterError(f"proposal grid spacing must be > 0, got {spacing}")
    n = int(math.floor(2.0 * half_extent / spacing + 1e-9)) + 1
    offsets = [k * spacing - (n - 1) * spacing / 2.0 for k in range(n)]
    # rows run along y, columns along x
    return [(x, y) for y in offsets for x in offsets]


def spawn_proposals(frame_extent: float, cfg: LifecycleConfig, frame_index: int = 0) -> list[QueryState]:
    """One proposal per grid point, ordered row-major; ids are ``frame_index * grid_size + k``."""
    pts = grid_points(frame_extent, cfg.proposal_grid_spacing)
    base = frame_index * len(pts)
    return [
        QueryState(base + k, QueryKind.PROPOSAL, origin_frame=frame_index, anchor=pt)
        for k, pt in enumerate(pts)
    ]


def select_top_n(queries: Sequence[QueryState], n: int) -> list[QueryState]:
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    return sorted(queries, key=lambda q: (-q.confidence, q.query_id))[:n]


def first_frame_gate(track_queries, proposal_queries, cfg: LifecycleConfig) -> list[QueryState]:
    """Queries entering the track decoder: all proposals when no tracks exist, else top-n_pq + tracks."""
    if not track_queries:
        return list(proposal_queries)
    return select_top_n(proposal_queries, cfg.n_pq) + list(track_queries)


def dropout_active(cfg: LifecycleConfig, training_step: int | None, total_steps: int | None) -> bool:
    if training_step is None or total_steps is None or total_steps <= 0:
        return True
    return training_step < cfg.dropout_disable_after_frac * total_steps


def sample_group(queries: Sequence[QueryState], group_id: int, cfg: LifecycleConfig, rng) -> QueryGroup:
    """The propagation set for one group: top-n_tq for group 0, a uniform n_tq-subset otherwise."""
    if group_id == 0:
        return QueryGroup(0, select_top_n(queries, cfg.n_tq), is_main=True)
    k = min(cfg.n_tq, len(queries))
    idx = np.sort(rng.choice(len(queries), size=k, replace=False)) if k else []
    return QueryGroup(group_id, [queries[i] for i in idx], is_main=False)


def dropout_groups(
    post_decode_queries: Sequence[QueryState],
    cfg: LifecycleConfig,
    rng,
    training_step: int | None = None,
    total_steps: int | None = None,
) -> list[QueryGroup]:
    groups = [sample_group(post_decode_queries, 0, cfg, rng)]
    if not dropout_active(cfg, training_step, total_steps):
        return groups
    for g in range(1, cfg.num_aux_groups + 1):
        groups.append(sample_group(post_decode_queries, g, cfg, rng))
    return groups


def propagate(group: QueryGroup, assignment: AssignmentResult) -> QueryGroup:
    """Turn a propagation set into next frame's track queries; bindings follow the assignment."""
    gt_of = assignment.gt_of()
    out = []
    for q in group.queries:
        anchor = q.anchor if q.prediction is None else (q.prediction.box.cx, q.prediction.box.cy)
        out.append(
            replace(
                q,
                kind=QueryKind.TRACK,
                prior_gt=gt_of.get(q.query_id),
                age=q.age + 1,
                anchor=anchor,
            )
        )
    return QueryGroup(group.group_id, out, is_main=group.is_main)


def inference_mode(groups: Sequence[QueryGroup]) -> QueryGroup:
    for g in groups:
        if g.is_main:
            return g
    raise StateError("no main query group to run inference with")


@dataclass
class EpisodeRecord:
    """One (frame, group) step of an episode, as written to the JSON-lines log."""

    scene_id: int
    frame: int
    group_id: int
    queries: list[QueryState]
    assignment: AssignmentResult
    labels: list[tuple[int, int | None]]
    features: list[list[float]] = field(default_factory=list)
    # object ids present in the previous episode frame / first seen here after the episode start
    tracked_ids: list[int] = field(default_factory=list)
    newborn_ids: list[int] = field(default_factory=list)
    mode: str = "Training"
    strategy: str = ""
    episode_start: int = 0
    propagated_ids: list[int] = field(default_factory=list)
    gt_objects: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "frame": self.frame,
            "group_id": self.group_id,
            "mode": self.mode,
            "strategy": self.strategy,
            "episode_start": self.episode_start,
            "queries": [q.to_dict() for q in self.queries],
            "assignment": self.assignment.to_dict(),
            "labels": [[q, g] for q, g in self.labels],
            "features": self.features,
            "tracked_ids": self.tracked_ids,
            "newborn_ids": self.newborn_ids,
            "propagated_ids": self.propagated_ids,
            "gt_objects": [
                [o.track_id, o.class_id, o.box.cx, o.box.cy, o.box.length, o.box.width, o.box.yaw, o.visible]
                for o in self.gt_objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        return cls(
            scene_id=int(d["scene_id"]),
            frame=int(d["frame"]),
            group_id=int(d["group_id"]),
            queries=[QueryState.from_dict(q) for q in d["queries"]],
            assignment=AssignmentResult.from_dict(d["assignment"]),
            labels=[(int(q), None if g is None else int(g)) for q, g in d["labels"]],
            features=[list(map(float, f)) for f in d.get("features", [])],
            tracked_ids=[int(x) for x in d.get("tracked_ids", [])],
            newborn_ids=[int(x) for x in d.get("newborn_ids", [])],
            mode=d.get("mode", "Training"),
            strategy=d.get("strategy", ""),
            episode_start=int(d.get("episode_start", 0)),
            propagated_ids=[int(x) for x in d.get("propagated_ids", [])],
            gt_objects=[
                GtObject(int(t), int(c), BoxBEV(x, y, l, w, yaw), visible=bool(v))
                for t, c, x, y, l, w, yaw, v in d.get("gt_objects", [])
            ],
        )
