import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from conftest import frame, gt, pq, tq
from tbasim.assignment import AssignmentResult, Stage, baseline_assign
from tbasim.errors import ParameterError, StateError
from tbasim.lifecycle import (
    EpisodeRecord,
    LifecycleConfig,
    QueryGroup,
    QueryKind,
    QueryState,
    dropout_active,
    dropout_groups,
    first_frame_gate,
    grid_points,
    inference_mode,
    propagate,
    sample_group,
    select_top_n,
    spawn_proposals,
)
from tbasim.rng import substream


def test_query_state_invariants():
    with pytest.raises(ParameterError):
        QueryState(0, QueryKind.PROPOSAL, prior_gt=3)
    with pytest.raises(ParameterError):
        QueryState(0, QueryKind.PROPOSAL, age=1)
    with pytest.raises(ParameterError):
        QueryState(0, QueryKind.TRACK, age=0)


def test_group_rejects_duplicate_ids():
    with pytest.raises(ParameterError):
        QueryGroup(0, [pq(1), pq(1)])


@pytest.mark.parametrize(
    "kw", [dict(n_pq=0), dict(n_tq=0), dict(num_aux_groups=-1), dict(dropout_disable_after_frac=1.5),
           dict(proposal_grid_spacing=0.0)]
)
def test_lifecycle_config_validation(kw):
    with pytest.raises(ParameterError):
        LifecycleConfig(**kw).validate()


# --- spawning -------------------------------------------------------------------------------

def test_grid_three_by_three():
    props = spawn_proposals(10.0, LifecycleConfig(proposal_grid_spacing=10.0))
    assert len(props) == 9
    assert [q.anchor for q in props[:3]] == [(-10.0, -10.0), (0.0, -10.0), (10.0, -10.0)]
    assert all(q.kind is QueryKind.PROPOSAL and q.prediction is None for q in props)


def test_spawn_is_deterministic_and_ids_are_per_frame():
    cfg = LifecycleConfig()
    assert spawn_proposals(20.0, cfg, 3) == spawn_proposals(20.0, cfg, 3)
    ids0 = {q.query_id for q in spawn_proposals(20.0, cfg, 0)}
    ids1 = {q.query_id for q in spawn_proposals(20.0, cfg, 1)}
    assert not ids0 & ids1


def test_coarse_grid_keeps_the_center():
    assert grid_points(5.0, 50.0) == [(0.0, 0.0)]


def test_non_positive_spacing_rejected():
    with pytest.raises(ParameterError):
        spawn_proposals(10.0, LifecycleConfig(proposal_grid_spacing=0.0))


# --- top-n and gating -----------------------------------------------------------------------

def test_select_top_n_examples():
    qs = [pq(0, conf=0.9), pq(1, conf=0.1), pq(2, conf=0.5)]
    assert [q.query_id for q in select_top_n(qs, 2)] == [0, 2]
    assert len(select_top_n(qs, 5)) == 3
    ties = [pq(i, conf=0.5) for i in (4, 2, 7, 1)]
    assert [q.query_id for q in select_top_n(ties, 2)] == [1, 2]
    with pytest.raises(ParameterError):
        select_top_n(qs, 0)


@given(st.lists(st.floats(0, 1), max_size=20), st.integers(1, 25))
def test_select_top_n_properties(confs, n):
    qs = [pq(i, conf=c) for i, c in enumerate(confs)]
    top = select_top_n(qs, n)
    assert len(top) == min(n, len(qs))
    assert [q.confidence for q in top] == sorted((q.confidence for q in top), reverse=True)
    if top and len(top) < len(qs):
        rest = [q for q in qs if q not in top]
        assert min(q.confidence for q in top) >= max(q.confidence for q in rest)


def test_first_frame_forwards_everything():
    cfg = LifecycleConfig(n_pq=4)
    props = [pq(i, conf=i / 10) for i in range(9)]
    assert len(first_frame_gate([], props, cfg)) == 9
    fwd = first_frame_gate([tq(100), tq(101)], props, cfg)
    assert len(fwd) == 6
    assert {q.query_id for q in fwd} == {8, 7, 6, 5, 100, 101}


# --- dropout --------------------------------------------------------------------------------

def _queries(n):
    return [pq(i, conf=(i * 7 % n) / n) for i in range(n)]


def test_no_aux_groups_gives_main_only():
    groups = dropout_groups(_queries(10), LifecycleConfig(n_tq=4, num_aux_groups=0), substream(0))
    assert len(groups) == 1 and groups[0].is_main
    assert groups[0].queries == select_top_n(_queries(10), 4)


def test_small_sets_make_dropout_degenerate():
    qs = _queries(3)
    groups = dropout_groups(qs, LifecycleConfig(n_tq=5, num_aux_groups=2), substream(1))
    assert len(groups) == 3
    for g in groups:
        assert {q.query_id for q in g.queries} == {0, 1, 2}


def test_main_is_top_n_and_aux_is_a_subset():
    qs = _queries(6)
    cfg = LifecycleConfig(n_tq=3, num_aux_groups=1)
    main, aux = dropout_groups(qs, cfg, substream(2))
    assert main.queries == select_top_n(qs, 3) and main.is_main and main.group_id == 0
    assert not aux.is_main and aux.group_id == 1
    assert len({q.query_id for q in aux.queries}) == 3


def test_aux_subsets_are_uniform():
    qs = _queries(6)
    cfg = LifecycleConfig(n_tq=3, num_aux_groups=1)
    index = {s: i for i, s in enumerate(itertools.combinations(range(6), 3))}
    counts = np.zeros(20)
    for seed in range(20_000):
        g = sample_group(qs, 1, cfg, substream(seed))
        counts[index[tuple(sorted(q.query_id for q in g.queries))]] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_dropout_schedule():
    cfg = LifecycleConfig(n_tq=2, num_aux_groups=1, dropout_disable_after_frac=0.75)
    assert dropout_active(cfg, 74, 100) and not dropout_active(cfg, 75, 100)
    assert dropout_active(cfg, None, None)
    assert len(dropout_groups(_queries(6), cfg, substream(3), 10, 100)) == 2
    assert len(dropout_groups(_queries(6), cfg, substream(3), 80, 100)) == 1


def test_dropout_is_deterministic_given_rng():
    cfg = LifecycleConfig(n_tq=3, num_aux_groups=2)
    a = dropout_groups(_queries(9), cfg, substream(5))
    b = dropout_groups(_queries(9), cfg, substream(5))
    assert a == b


# --- propagation ----------------------------------------------------------------------------

def test_assigned_proposal_becomes_bound_track_query():
    p = pq(3, 1.0, 2.0)
    res = AssignmentResult(pairs=[(3, 42, Stage.FIRST_STAGE)])
    out = propagate(QueryGroup(0, [p], is_main=True), res)
    (q,) = out.queries
    assert q.kind is QueryKind.TRACK and q.prior_gt == 42 and q.age == 1 and q.query_id == 3
    assert q.anchor == (1.0, 2.0)
    assert out.group_id == 0 and out.is_main


def test_unselected_queries_are_dropped_and_rebinding_follows_assignment():
    a, b = tq(10, prior=1), tq(11, prior=None, age=4)
    res = AssignmentResult(pairs=[(10, 1, Stage.CONTINUATION), (11, 9, Stage.SECOND_CHANCE)])
    out = propagate(QueryGroup(2, [b]), res)
    assert [q.query_id for q in out.queries] == [11]
    assert out.queries[0].prior_gt == 9 and out.queries[0].age == 5
    assert out.group_id == 2


def test_unassigned_track_query_loses_its_binding():
    out = propagate(QueryGroup(0, [tq(10, prior=1, age=2)]), AssignmentResult(unassigned_queries=[10]))
    assert out.queries[0].prior_gt is None and out.queries[0].age == 3


def test_dropping_a_track_query_changes_the_aux_assignment():
    car = frame(gt(1, 0, 0))
    tq_a, pq_y = tq(10, 0.1, 0, prior=1), pq(0, 0.3, 0)
    main = baseline_assign([tq_a], [pq_y], car)
    aux = baseline_assign([], [pq_y], car)
    assert main.pairs == [(10, 1, Stage.CONTINUATION)]
    assert aux.pairs == [(0, 1, Stage.FIRST_STAGE)]


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(0, 5))
def test_age_increases_by_one_per_step(start_age, steps):
    g = QueryGroup(0, [tq(1, prior=7, age=start_age)])
    for _ in range(steps):
        g = propagate(g, AssignmentResult(pairs=[(1, 7, Stage.CONTINUATION)]))
    assert g.queries[0].age == start_age + steps and g.queries[0].prior_gt == 7


# --- inference ------------------------------------------------------------------------------

def test_inference_mode_picks_main():
    main, aux = QueryGroup(0, [], is_main=True), QueryGroup(1, [])
    assert inference_mode([main, aux]) is main
    assert inference_mode([main]) is main
    with pytest.raises(StateError):
        inference_mode([aux])


def test_episode_record_roundtrip():
    qs = [tq(10, 0.1, 0, prior=1), pq(0, 0.3, 0)]
    f = frame(gt(1, 0, 0), gt(2, 5, 5, visible=False))
    res = baseline_assign(qs[:1], qs[1:], f)
    rec = EpisodeRecord(0, 3, 0, qs, res, [(10, 1), (0, None)], [[1, 0.1, 0, 0, 1], [0, 0, 0.1, 1, 0.9]],
                        tracked_ids=[1], newborn_ids=[2], propagated_ids=[10], gt_objects=list(f.objects))
    back = EpisodeRecord.from_dict(rec.to_dict())
    assert back == rec
