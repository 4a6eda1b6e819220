import csv
import io
import json
from dataclasses import replace

import pytest

from tbasim.assignment import Stage
from tbasim.errors import ParameterError
from tbasim.harness import (
    CSV_HEADER,
    ComparisonReport,
    ExperimentConfig,
    Mode,
    Strategy,
    load_config,
    make_scenes,
    report,
    run_comparison,
    run_episode,
    split_scenes,
    strategy_config,
    tracker_outputs,
)
from tbasim.lifecycle import QueryKind
from tbasim.world import ScenarioParams, generate_scenario

CFG = ExperimentConfig(num_scenes=3, seed=1)


@pytest.fixture(scope="module")
def scene():
    return make_scenes(CFG)[0]


@pytest.fixture(scope="module")
def small_comparison():
    return run_comparison(replace(CFG, num_scenes=4), [Strategy.BASELINE, Strategy.SCA, Strategy.SCA_DROPOUT])


# --- config ---------------------------------------------------------------------------------

def test_config_roundtrip_and_hash():
    d = CFG.to_dict()
    back = ExperimentConfig.from_dict(json.loads(json.dumps(d)))
    assert back == CFG and back.config_hash() == CFG.config_hash()
    assert replace(CFG, output_dir="elsewhere").config_hash() == CFG.config_hash()
    assert replace(CFG, seed=2).config_hash() != CFG.config_hash()


def test_config_rejects_bad_values():
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"num_scenes": 0})
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"no_such_field": 1})
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"strategy": "Magic"})
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"lifecycle": {"n_tq": 0}})


def test_load_config_and_output_override(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"num_scenes": 2, "seed": 9, "output_dir": "a"}))
    monkeypatch.delenv("TBA_OUT", raising=False)
    assert load_config(str(p)).output_dir == "a"
    monkeypatch.setenv("TBA_OUT", str(tmp_path / "b"))
    cfg = load_config(str(p))
    assert cfg.output_dir == str(tmp_path / "b") and cfg.seed == 9
    with pytest.raises(ParameterError):
        load_config(str(tmp_path / "missing.json"))


def test_strategy_config_sets_aux_groups():
    assert strategy_config(CFG, Strategy.BASELINE).lifecycle.num_aux_groups == 0
    assert strategy_config(CFG, Strategy.SCA_DROPOUT).lifecycle.num_aux_groups == 1
    two = replace(CFG, lifecycle=replace(CFG.lifecycle, num_aux_groups=2))
    assert strategy_config(two, Strategy.DROPOUT).lifecycle.num_aux_groups == 2


# --- episodes -------------------------------------------------------------------------------

def test_inference_logs_one_group_and_no_second_chance(scene):
    recs = run_episode(strategy_config(CFG, Strategy.SCA_DROPOUT), scene, Mode.INFERENCE)
    assert len(recs) == len(scene.frames)
    assert all(r.group_id == 0 for r in recs)
    assert all(s is not Stage.SECOND_CHANCE for r in recs for _, _, s in r.assignment.pairs)


def test_training_with_one_aux_group_logs_two_groups_after_frame_zero(scene):
    cfg = replace(CFG, lifecycle=replace(CFG.lifecycle, num_aux_groups=1))
    recs = run_episode(cfg, scene, Mode.TRAINING, strategy=Strategy.BASELINE, frame_range=(0, 10))
    per_frame = {}
    for r in recs:
        per_frame.setdefault(r.frame, []).append(r.group_id)
    assert per_frame[0] == [0]
    assert all(sorted(per_frame[t]) == [0, 1] for t in range(1, 10))


def test_first_frame_has_no_continuation(scene):
    for start in (0, 10, 20):
        recs = run_episode(CFG, scene, Mode.TRAINING, frame_range=(start, start + 5))
        first = [r for r in recs if r.frame == start]
        assert first and all(s is not Stage.CONTINUATION for r in first for _, _, s in r.assignment.pairs)
        assert all(q.kind is QueryKind.PROPOSAL for r in first for q in r.queries)


def test_episode_is_deterministic(scene):
    a = run_episode(CFG, scene, Mode.TRAINING, frame_range=(0, 10))
    b = run_episode(CFG, scene, Mode.TRAINING, frame_range=(0, 10))
    assert [json.dumps(r.to_dict()) for r in a] == [json.dumps(r.to_dict()) for r in b]


def test_arena_mismatch_is_a_parameter_error():
    other = generate_scenario(ScenarioParams(arena_half_extent=30.0), seed=0)
    with pytest.raises(ParameterError):
        run_episode(CFG, other, Mode.TRAINING)


def test_bad_frame_range(scene):
    with pytest.raises(ParameterError):
        run_episode(CFG, scene, Mode.TRAINING, frame_range=(5, 5))


def test_main_group_always_propagates_top_n(scene):
    cfg = strategy_config(CFG, Strategy.SCA_DROPOUT)
    for r in run_episode(cfg, scene, Mode.TRAINING, frame_range=(0, 10)):
        if r.group_id == 0:
            top = sorted(r.queries, key=lambda q: (-q.confidence, q.query_id))[: cfg.lifecycle.n_tq]
            assert r.propagated_ids == [q.query_id for q in top]


def test_tracker_outputs_keep_scenes_apart():
    scenes = make_scenes(CFG)
    recs = [r for sc in scenes[:2] for r in run_episode(CFG, sc, Mode.INFERENCE, frame_range=(0, 3))]
    outs, gts = tracker_outputs(recs)
    assert len(gts) == 6
    assert len({(o.frame, o.pred_track_id) for o in outs}) == len(outs)


def test_split_scenes():
    scenes = make_scenes(replace(CFG, num_scenes=10))
    train, held = split_scenes(scenes, 0.7)
    assert [s.scene_id for s in train] == list(range(7)) and [s.scene_id for s in held] == [7, 8, 9]
    one = scenes[:1]
    assert split_scenes(one, 0.7) == (one, one)


# --- comparison and reports -----------------------------------------------------------------

def test_single_strategy_comparison_has_no_deltas():
    c = run_comparison(replace(CFG, num_scenes=2), [Strategy.BASELINE])
    assert c.strategies == ["Baseline"] and c.deltas == {}


def test_comparison_rejects_empty_strategy_list():
    with pytest.raises(ParameterError):
        run_comparison(CFG, [])


def test_sca_stage2_cost_not_above_baseline_without_suppression():
    cfg = replace(CFG, num_scenes=6, seed=0, oracle=replace(CFG.oracle, suppression_strength=0.0))
    c = run_comparison(cfg, [Strategy.BASELINE, Strategy.SCA])
    assert c.results["SCA"].stage2_cost <= c.results["Baseline"].stage2_cost


def test_dropout_raises_proposal_positive_rate(small_comparison):
    rates = {k: v.positive_label_rates["Proposal"] for k, v in small_comparison.results.items()}
    assert rates["SCA_Dropout"] > rates["Baseline"]


def test_report_json_roundtrip(small_comparison):
    text = report(small_comparison, "json")
    assert ComparisonReport.from_dict(json.loads(text)) == small_comparison
    assert report(ComparisonReport.from_dict(json.loads(text)), "json") == text


def test_report_csv_header(small_comparison):
    rows = list(csv.reader(io.StringIO(report(small_comparison, "csv"))))
    assert ",".join(rows[0]) == "strategy,amota,amotp,fp,fn,ids,tq_recall,nb_conf,trk_conf"
    assert tuple(rows[0]) == CSV_HEADER
    assert [r[0] for r in rows[1:]] == ["Baseline", "SCA", "SCA_Dropout"]


def test_report_markdown_rows(small_comparison):
    md = report(small_comparison, "markdown")
    body = [line for line in md.splitlines() if line.startswith("| ") and not line.startswith("| Strategy")]
    assert [line.split("|")[1].strip() for line in body] == ["Baseline", "SCA", "SCA_Dropout"]


def test_report_unknown_format(small_comparison):
    with pytest.raises(ParameterError):
        report(small_comparison, "xml")


def test_reports_embed_the_config_hash(small_comparison):
    h = small_comparison.config_hash
    assert all(r.metrics.config_hash == h for r in small_comparison.results.values())
