"""Experiment configuration, episode runner, strategy comparison and reports."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .assignment import (
    AssignmentResult,
    CostParams,
    baseline_assign,
    detection_assign,
    second_chance_assign,
    supervision_labels,
)
from .errors import ParameterError
from .lifecycle import (
    EpisodeRecord,
    LifecycleConfig,
    QueryGroup,
    QueryKind,
    dropout_active,
    first_frame_gate,
    propagate,
    sample_group,
    spawn_proposals,
)
from .metrics import (
    MetricsReport,
    TrackedOutput,
    amota_amotp,
    confidence_stats,
    positive_label_rates,
    tq_recall,
)
from .oracle import ConfidenceModel, OracleParams, decode, group_features, train_confidence_model
from .rng import DETECTION_STREAM, derive_seed, substream
from .world import Scene, ScenarioParams, generate_scenario, split_clips

DROPOUT_STREAM = 2_000_003


class Strategy(str, enum.Enum):
    BASELINE = "Baseline"
    DROPOUT = "Dropout"
    SCA = "SCA"
    SCA_DROPOUT = "SCA_Dropout"
    DETECTION = "Detection"

    @property
    def uses_sca(self) -> bool:
        return self in (Strategy.SCA, Strategy.SCA_DROPOUT)

    @property
    def uses_dropout(self) -> bool:
        return self in (Strategy.DROPOUT, Strategy.SCA_DROPOUT)


class Mode(str, enum.Enum):
    TRAINING = "Training"
    INFERENCE = "Inference"


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 64
    pos_weight: float = 1.0


@dataclass
class ExperimentConfig:
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    cost: CostParams = field(default_factory=CostParams)
    oracle: OracleParams = field(default_factory=OracleParams)
    strategy: Strategy = Strategy.SCA_DROPOUT
    strategies: tuple[Strategy, ...] = (Strategy.BASELINE, Strategy.SCA, Strategy.SCA_DROPOUT)
    num_scenes: int = 20
    seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    max_clip_len: int = 10
    train_fraction: float = 0.7
    num_thresholds: int = 40
    dist_threshold_m: float = 2.0
    output_dir: str = "out"

    def validate(self) -> None:
        self.scenario.validate()
        self.lifecycle.validate()
        self.oracle.validate()
        if self.num_scenes < 1:
            raise ParameterError("ExperimentConfig.num_scenes must be >= 1")
        if self.max_clip_len < 2:
            raise ParameterError("ExperimentConfig.max_clip_len must be >= 2")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ParameterError("ExperimentConfig.train_fraction must be in (0, 1]")
        if self.training.epochs < 1 or not self.training.lr > 0 or self.training.batch_size < 1:
            raise ParameterError("ExperimentConfig.training needs epochs >= 1, lr > 0, batch_size >= 1")
        if self.oracle.num_classes != self.scenario.num_classes:
            raise ParameterError("oracle.num_classes must equal scenario.num_classes")

    def to_dict(self) -> dict:
        d = {
            "scenario": asdict(self.scenario),
            "lifecycle": asdict(self.lifecycle),
            "cost": asdict(self.cost),
            "oracle": asdict(self.oracle),
            "strategy": self.strategy.value,
            "strategies": [s.value for s in self.strategies],
            "num_scenes": self.num_scenes,
            "seed": self.seed,
            "training": asdict(self.training),
            "max_clip_len": self.max_clip_len,
            "train_fraction": self.train_fraction,
            "num_thresholds": self.num_thresholds,
            "dist_threshold_m": self.dist_threshold_m,
            "output_dir": self.output_dir,
        }
        d["scenario"]["speed_range"] = list(self.scenario.speed_range)
        if self.scenario.class_weights is not None:
            d["scenario"]["class_weights"] = list(self.scenario.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "scenario" in kw:
                kw["scenario"] = ScenarioParams.from_dict(kw["scenario"])
            if "lifecycle" in kw:
                kw["lifecycle"] = LifecycleConfig(**kw["lifecycle"])
            if "cost" in kw:
                kw["cost"] = CostParams(**kw["cost"])
            if "oracle" in kw:
                kw["oracle"] = OracleParams(**kw["oracle"])
            if "training" in kw:
                kw["training"] = TrainingConfig(**kw["training"])
            if "strategy" in kw:
                kw["strategy"] = Strategy(kw["strategy"])
            if "strategies" in kw:
                kw["strategies"] = tuple(Strategy(s) for s in kw["strategies"])
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"bad config: {exc}") from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        """sha256 over the canonical JSON form, excluding where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        cfg = ExperimentConfig.from_dict(raw)
    env_out = os.environ.get("TBA_OUT")
    if env_out:
        cfg.output_dir = env_out
    cfg.validate()
    return cfg


def strategy_config(config: ExperimentConfig, strategy: Strategy) -> ExperimentConfig:
    """Config as run for one ablation column: aux groups only for the dropout strategies."""
    aux = max(1, config.lifecycle.num_aux_groups) if strategy.uses_dropout else 0
    return replace(config, strategy=strategy, lifecycle=replace(config.lifecycle, num_aux_groups=aux))


def _assigner(strategy: Strategy, mode: Mode):
    if strategy is Strategy.DETECTION:
        return detection_assign
    if mode is Mode.TRAINING and strategy.uses_sca:
        return second_chance_assign
    return baseline_assign


def run_episode(
    config: ExperimentConfig,
    scene: Scene,
    mode: Mode = Mode.TRAINING,
    *,
    strategy: Strategy | None = None,
    model: ConfidenceModel | None = None,
    frame_range: tuple[int, int] | None = None,
    training_step: int | None = None,
    total_steps: int | None = None,
) -> list[EpisodeRecord]:
    """Run the query lifecycle over a frame range; one record per (frame, group).

    Groups are independent branches: each decodes, assigns and propagates its own
    query set with its own random substream. Auxiliary groups are split off the
    main group's first post-decode set and then evolve on their own.
    """
    mode = Mode(mode)
    strategy = Strategy(strategy if strategy is not None else config.strategy)
    if scene.params.arena_half_extent != config.scenario.arena_half_extent:
        raise ParameterError(
            f"scene arena half-extent {scene.params.arena_half_extent} does not match "
            f"config {config.scenario.arena_half_extent}"
        )
    start, end = frame_range if frame_range is not None else (0, len(scene.frames))
    if not 0 <= start < end <= len(scene.frames):
        raise ParameterError(f"frame_range {frame_range} outside scene of {len(scene.frames)} frames")
    lc, op, cp = config.lifecycle, config.oracle, config.cost
    assign = _assigner(strategy, mode)
    n_aux = 0
    if mode is Mode.TRAINING and dropout_active(lc, training_step, total_steps):
        n_aux = lc.num_aux_groups
    ep_seed = derive_seed(config.seed, scene.scene_id, start)

    branches: dict[int, list] = {0: []}
    seen: set[int] = set()
    prev_ids: set[int] = set()
    records: list[EpisodeRecord] = []
    for t in range(start, end):
        frame = scene.frames[t]
        ids_now = [o.track_id for o in frame.objects]
        tracked = [g for g in ids_now if g in prev_ids]
        newborn = [g for g in ids_now if g not in seen and t > start]
        proposals = spawn_proposals(config.scenario.arena_half_extent, lc, t)
        detected = decode(
            QueryGroup(-1, proposals), frame, op, model, substream(ep_seed, t, DETECTION_STREAM)
        ).queries

        next_branches: dict[int, list] = {}
        for gid in sorted(branches):
            forwarded = first_frame_gate(branches[gid], detected, lc)
            grp = decode(QueryGroup(gid, forwarded, is_main=gid == 0), frame, op, model, substream(ep_seed, t, gid))
            tqs = [q for q in grp.queries if q.kind is QueryKind.TRACK]
            pqs = [q for q in grp.queries if q.kind is QueryKind.PROPOSAL]
            result: AssignmentResult = assign(tqs, pqs, frame, cp)
            labels = supervision_labels(result, grp.queries)

            # branch 0 seeds every auxiliary branch the first time it propagates
            spawn = range(n_aux + 1) if (gid == 0 and len(branches) == 1) else (gid,)
            propagated_ids = []
            for g in spawn:
                rng = substream(ep_seed, t, g, DROPOUT_STREAM)
                chosen = sample_group(grp.queries, g, lc, rng)
                if g == gid:
                    propagated_ids = [q.query_id for q in chosen.queries]
                next_branches[g] = propagate(chosen, result).queries

            records.append(
                EpisodeRecord(
                    scene_id=scene.scene_id,
                    frame=t,
                    group_id=gid,
                    queries=grp.queries,
                    assignment=result,
                    labels=labels,
                    features=group_features(grp, frame, op),
                    tracked_ids=tracked,
                    newborn_ids=newborn,
                    mode=mode.value,
                    strategy=strategy.value,
                    episode_start=start,
                    propagated_ids=propagated_ids,
                    gt_objects=list(frame.objects),
                )
            )
        branches = next_branches
        seen.update(ids_now)
        prev_ids = set(ids_now)
    return records


# --- tracker outputs and evaluation -------------------------------------------------------

_ID_STRIDE = 10_000_000


def tracker_outputs(records: Sequence[EpisodeRecord]):
    """Main-group queries as tracker outputs plus the matching ground truth, pooled over scenes.

    Frame keys and ids are offset per scene so identities never collide across scenes.
    """
    outputs, gt = [], {}
    for rec in records:
        if rec.group_id != 0:
            continue
        off = rec.scene_id * _ID_STRIDE
        key = off + rec.frame
        gt[key] = [replace(o, track_id=off + o.track_id) for o in rec.gt_objects]
        for q in rec.queries:
            p = q.prediction
            cls = max(range(len(p.class_scores)), key=lambda k: (p.class_scores[k], -k))
            outputs.append(TrackedOutput(key, off + q.query_id, p.box, cls, p.confidence))
    return outputs, gt


def evaluate_logs(
    records: Sequence[EpisodeRecord],
    num_thresholds: int = 40,
    dist_threshold_m: float = 2.0,
    seed: int | None = None,
    config_hash: str = "",
) -> MetricsReport:
    outputs, gt = tracker_outputs(records)
    amota, amotp, curve, acc = amota_amotp(outputs, gt, num_thresholds, dist_threshold_m)
    nb, trk = confidence_stats([r for r in records if r.group_id == 0], dist_threshold_m)
    return MetricsReport(
        amota=amota,
        amotp=amotp,
        mota_r_curve=curve,
        fp=acc.fp,
        fn=acc.fn,
        ids=acc.ids,
        tq_recall=tq_recall([r for r in records if r.group_id == 0]),
        nb_conf_mean=nb,
        trk_conf_mean=trk,
        seed=seed,
        config_hash=config_hash,
    )


# --- comparison -----------------------------------------------------------------------------

@dataclass
class StrategyResult:
    metrics: MetricsReport
    positive_label_rates: dict[str, float | None]
    stage2_cost: float
    loss_curve: list[float]
    model: dict
    training_records: int

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics.to_dict(),
            "positive_label_rates": dict(self.positive_label_rates),
            "stage2_cost": self.stage2_cost,
            "loss_curve": list(self.loss_curve),
            "model": self.model,
            "training_records": self.training_records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyResult":
        return cls(
            metrics=MetricsReport.from_dict(d["metrics"]),
            positive_label_rates=dict(d["positive_label_rates"]),
            stage2_cost=float(d["stage2_cost"]),
            loss_curve=[float(x) for x in d["loss_curve"]],
            model=d["model"],
            training_records=int(d["training_records"]),
        )


@dataclass
class ComparisonReport:
    config_hash: str
    seed: int
    num_scenes: int
    strategies: list[str]
    results: dict[str, StrategyResult]
    deltas: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "num_scenes": self.num_scenes,
            "strategies": list(self.strategies),
            "results": {k: self.results[k].to_dict() for k in self.strategies},
            "deltas": self.deltas,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(
            config_hash=d["config_hash"],
            seed=int(d["seed"]),
            num_scenes=int(d["num_scenes"]),
            strategies=list(d["strategies"]),
            results={k: StrategyResult.from_dict(v) for k, v in d["results"].items()},
            deltas=d.get("deltas", {}),
        )


_DELTA_FIELDS = ("amota", "amotp", "fp", "fn", "ids", "tq_recall", "nb_conf_mean", "trk_conf_mean")


def _deltas(results: dict[str, StrategyResult], order: Sequence[str]) -> dict:
    if len(order) < 2:
        return {}
    ref = results[order[0]].metrics
    out = {}
    for name in order[1:]:
        m = results[name].metrics
        row = {}
        for f in _DELTA_FIELDS:
            a, b = getattr(m, f), getattr(ref, f)
            row[f] = None if a is None or b is None else a - b
        out[name] = row
    return out


def split_scenes(scenes: Sequence[Scene], train_fraction: float):
    if len(scenes) == 1:
        return list(scenes), list(scenes)
    n_train = min(len(scenes) - 1, max(1, math.ceil(train_fraction * len(scenes) - 1e-9)))
    return list(scenes[:n_train]), list(scenes[n_train:])


def make_scenes(config: ExperimentConfig, num_scenes: int | None = None, seed: int | None = None) -> list[Scene]:
    n = config.num_scenes if num_scenes is None else num_scenes
    s = config.seed if seed is None else seed
    return [generate_scenario(config.scenario, s, scene_id=i) for i in range(n)]


def training_logs(config: ExperimentConfig, scenes: Sequence[Scene], strategy: Strategy) -> list[EpisodeRecord]:
    clips = [c for sc in scenes for c in split_clips(sc, config.max_clip_len)]
    by_id = {sc.scene_id: sc for sc in scenes}
    logs = []
    for step, clip in enumerate(clips):
        logs.extend(
            run_episode(
                config,
                by_id[clip.scene_id],
                Mode.TRAINING,
                strategy=strategy,
                frame_range=clip.frame_range,
                training_step=step,
                total_steps=len(clips),
            )
        )
    return logs


def run_strategy(
    config: ExperimentConfig, strategy: Strategy, train_scenes, eval_scenes, config_hash: str
) -> StrategyResult:
    cfg = strategy_config(config, strategy)
    logs = training_logs(cfg, train_scenes, strategy)
    tr = cfg.training
    model, curve = train_confidence_model(logs, tr.epochs, tr.lr, cfg.seed, tr.batch_size, tr.pos_weight)
    inference = []
    for sc in eval_scenes:
        inference.extend(run_episode(cfg, sc, Mode.INFERENCE, strategy=strategy, model=model))
    metrics = evaluate_logs(inference, cfg.num_thresholds, cfg.dist_threshold_m, cfg.seed, config_hash)
    return StrategyResult(
        metrics=metrics,
        positive_label_rates=positive_label_rates(logs),
        stage2_cost=math.fsum(r.assignment.total_second_stage_cost for r in logs),
        loss_curve=curve,
        model=model.to_dict(),
        training_records=len(logs),
    )


def run_comparison(
    config: ExperimentConfig,
    strategies: Sequence[Strategy] | None = None,
    num_scenes: int | None = None,
    seed: int | None = None,
) -> ComparisonReport:
    """Train and evaluate every strategy on the same generated scenes."""
    strategies = [Strategy(s) for s in (strategies if strategies is not None else config.strategies)]
    if not strategies:
        raise ParameterError("run_comparison needs at least one strategy")
    if num_scenes is not None or seed is not None:
        config = replace(
            config,
            num_scenes=config.num_scenes if num_scenes is None else num_scenes,
            seed=config.seed if seed is None else seed,
        )
    config.validate()
    h = config.config_hash()
    scenes = make_scenes(config)
    train, held_out = split_scenes(scenes, config.train_fraction)
    results = {}
    for s in strategies:
        results[s.value] = run_strategy(config, s, train, held_out, h)
    for s, r in results.items():
        if r.metrics.config_hash != h:
            raise ParameterError(f"strategy {s} was evaluated under a different config")
    order = [s.value for s in strategies]
    return ComparisonReport(h, config.seed, config.num_scenes, order, results, _deltas(results, order))


# --- reports --------------------------------------------------------------------------------

CSV_HEADER = ("strategy", "amota", "amotp", "fp", "fn", "ids", "tq_recall", "nb_conf", "trk_conf")


def _fmt(v, digits=4):
    if v is None:
        return "n/a"
    if isinstance(v, int):
        return str(v)
    return f"{v:.{digits}f}"


def report(comparison: ComparisonReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name in comparison.strategies:
            m = comparison.results[name].metrics
            w.writerow([name, repr(m.amota), repr(m.amotp), m.fp, m.fn, m.ids,
                        "" if m.tq_recall is None else repr(m.tq_recall),
                        "" if m.nb_conf_mean is None else repr(m.nb_conf_mean),
                        "" if m.trk_conf_mean is None else repr(m.trk_conf_mean)])
        return buf.getvalue()
    if fmt == "markdown":
        lines = [
            f"Config `{comparison.config_hash}`, seed {comparison.seed}, {comparison.num_scenes} scenes.",
            "",
            "| Strategy | S.C. Assignment | TQ Dropout | AMOTA | AMOTP | FP | FN | IDS | NB Conf | Trk Conf | TQ Recall | PQ pos. rate |",
            "|---|:-:|:-:|---:|---:|---:|---:|---:|---:|---:|---:|---:|",
        ]
        for name in comparison.strategies:
            s = Strategy(name)
            r = comparison.results[name]
            m = r.metrics
            lines.append(
                f"| {name} | {'yes' if s.uses_sca else 'no'} | {'yes' if s.uses_dropout else 'no'} "
                f"| {_fmt(m.amota)} | {_fmt(m.amotp)} | {m.fp} | {m.fn} | {m.ids} "
                f"| {_fmt(m.nb_conf_mean)} | {_fmt(m.trk_conf_mean)} | {_fmt(m.tq_recall)} "
                f"| {_fmt(r.positive_label_rates.get(QueryKind.PROPOSAL.value))} |"
            )
        return "\n".join(lines) + "\n"
    raise ParameterError(f"unknown report format {fmt!r}; expected json, csv or markdown")
