import dataclasses
import json
import math

import numpy as np
import pytest
from filelock import FileLock

from cotrain import harness as H
from cotrain import planner as P
from cotrain import validation as V
from cotrain.ontology import ExpandedPlan, SubtaskBank, load_ontology


def tiny_config(**kw) -> H.PipelineConfig:
    base = H.PipelineConfig(cycles=1, train_steps=4096, validation_seeds=2, eval_seeds=2,
                            planner=H.PlannerSettings(sft_epochs=20))
    return dataclasses.replace(base, **kw)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("tiny")
    H.run_pipeline(cfg, out)
    return cfg, out


def read_bytes(out, names):
    return {n: (out / n).read_bytes() for n in names}


# -- configuration -----------------------------------------------------------


def test_config_roundtrip():
    cfg = tiny_config(seed=7).with_ablation("no-dpo")
    back = H.PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_config_file_roundtrip(tmp_path):
    cfg = tiny_config(seed=3)
    H.save_config(tmp_path / "c.json", cfg)
    assert H.load_config(tmp_path / "c.json") == cfg


def test_partial_config_uses_defaults():
    cfg = H.PipelineConfig.from_dict({"seed": 4, "agent": {"hidden": 32}})
    assert cfg.seed == 4 and cfg.agent.hidden == 32
    assert cfg.agent.learning_rate == H.PipelineConfig().agent.learning_rate


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"flags": {"ontolgy": False}},
    {"agent": {"lr": 0.1}},
    {"env": {"grid": 9}},
    {"planner": {"betta": 1.0}},
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ValueError, match="unknown"):
        H.PipelineConfig.from_dict(doc)


@pytest.mark.parametrize("kw", [{"cycles": -1}, {"train_steps": -5}, {"validation_seeds": 0},
                                {"eval_seeds": 0}])
def test_invalid_budgets(kw):
    with pytest.raises(ValueError):
        H.PipelineConfig(**kw)


def test_seed_changes_hash():
    assert tiny_config(seed=0).config_hash() != tiny_config(seed=1).config_hash()


def test_ablation_profiles():
    assert set(H.ABLATIONS) == {"no-ontology", "no-curriculum", "no-dpo", "no-sft", "full",
                                "auto-done", "no-plan"}
    base = H.PipelineConfig()
    assert base.with_ablation("full").flags == H.Flags()
    assert base.with_ablation("no-ontology").flags.ontology is False
    assert base.with_ablation("auto-done").flags.auto_done is True
    np_flags = base.with_ablation("no-plan").flags
    assert np_flags.no_plan and not np_flags.curriculum


def test_stage_names():
    assert H.stage_names(0) == ["data", "ontology", "plans", "sft"]
    names = H.stage_names(2)
    assert names[4:8] == ["train-c1", "validate-c1", "dpo-c1", "reprioritize-c1"]
    assert names[-1] == "eval" and len(names) == 13


# -- pipeline ----------------------------------------------------------------


def test_pipeline_artifacts(tiny_run):
    cfg, out = tiny_run
    manifest = json.loads((out / "manifest.json").read_text())
    paths = {e["path"] for e in manifest["artifacts"]}
    for name in ["dataset.jsonl", "bank.json", "ontology.json", "plans_c0.jsonl", "planner_sft.json",
                 "policy_c1.json", "validation_c1.jsonl", "pairs_c1.jsonl", "planner_dpo_c1.json",
                 "plans_c1.jsonl", "eval.jsonl", "eval_by_split.csv", "metrics.json", "rank_table.csv"]:
        assert name in paths
    for e in manifest["artifacts"]:
        assert H.sha256_file(out / e["path"]) == e["sha256"]
    assert manifest["config_hash"] == cfg.config_hash()


def test_metrics_are_strict_json(tiny_run):
    _, out = tiny_run
    text = (out / "metrics.json").read_text()
    assert "NaN" not in text
    doc = json.loads(text)
    assert doc["schema"] == H.METRICS_SCHEMA
    assert set(doc["sr_by_split"]) == {"Atomic", "Combo", "Paraphrase", "NewObjects"}
    for v in doc["spearman"].values():
        assert v is None or -1.0 <= v <= 1.0


def test_reprioritize_keeps_top_k(tiny_run):
    cfg, out = tiny_run
    run = H.Run(cfg, out)
    before, after = run.pool(0), run.pool(1)
    assert set(before) == set(after)
    for iid, plans in after.items():
        assert 1 <= len(plans) <= cfg.planner.top_k
        assert {p.variant for p in plans} <= {p.variant for p in before[iid]}


def test_stage_isolation(tiny_run, tmp_path):
    """Re-running a stage from persisted inputs reproduces its outputs bit-for-bit."""
    cfg, out = tiny_run
    import shutil
    shutil.copytree(out, tmp_path / "copy")
    run = H.Run(cfg, tmp_path / "copy")
    for stage in ["plans", "sft", "train-c1", "validate-c1", "dpo-c1", "reprioritize-c1", "eval"]:
        arts = run.completed()[stage]
        want = read_bytes(out, arts)
        for a in arts:
            (tmp_path / "copy" / a).unlink()
        H.run_stage(run, stage)
        assert read_bytes(tmp_path / "copy", arts) == want, stage


def test_resume_matches_straight_run(tiny_run, tmp_path):
    cfg, out = tiny_run
    done = H.run_pipeline(cfg, tmp_path, stop_after="sft")
    assert list(done) == ["data", "ontology", "plans", "sft"]
    assert not (tmp_path / "policy_c1.json").exists()
    H.run_pipeline(cfg, tmp_path, resume=True)
    assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()
    assert (tmp_path / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()


def test_resume_rejects_other_config(tiny_run, tmp_path):
    cfg, _ = tiny_run
    H.run_pipeline(cfg, tmp_path, stop_after="data")
    with pytest.raises(ValueError, match="different configuration"):
        H.run_pipeline(dataclasses.replace(cfg, seed=99), tmp_path, resume=True)


def test_unknown_stop_after(tmp_path):
    with pytest.raises(ValueError, match="unknown stage"):
        H.run_pipeline(tiny_config(), tmp_path, stop_after="nope")


def test_lock_excludes_second_process(tmp_path):
    lock = FileLock(str(tmp_path / ".lock"))
    with lock:
        with pytest.raises(H.LockedError):
            H.run_pipeline(tiny_config(), tmp_path)
    H.run_pipeline(tiny_config(), tmp_path, stop_after="data")


def test_stage_error_names_stage(tmp_path):
    cfg = tiny_config()
    H.run_pipeline(cfg, tmp_path, stop_after="ontology")
    (tmp_path / "ontology.json").write_text("{broken")
    with pytest.raises(H.StageError) as info:
        H.run_pipeline(cfg, tmp_path, resume=True)
    assert info.value.stage == "plans"
    # artifacts of the completed prefix survive the failure
    assert list(H.Run(cfg, tmp_path).completed()) == ["data", "ontology"]


def test_run_stage_rejects_foreign_stage(tmp_path):
    run = H.Run(tiny_config(), tmp_path)
    with pytest.raises(ValueError):
        H.run_stage(run, "train-c2")


def test_zero_cycles_artifacts(tmp_path):
    cfg = tiny_config(cycles=0)
    H.run_pipeline(cfg, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {e["path"] for e in manifest["artifacts"]} == {
        "dataset.jsonl", "bank.json", "goal_plans.json", "ontology.json", "plans_c0.jsonl",
        "planner_sft.json", "sft_log.json"}


def test_no_ontology_plans_are_goal_sequences(tmp_path):
    cfg = tiny_config(cycles=0).with_ablation("no-ontology")
    H.run_pipeline(cfg, tmp_path)
    run = H.Run(cfg, tmp_path)
    assert not (tmp_path / "ontology.json").exists()
    goal_plans = run.goal_plans()
    for iid, plans in run.pool(0).items():
        assert [p.steps for p in plans] == [goal_plans[iid]]


def test_ontology_stage_builds_acyclic_graph(tiny_run):
    _, out = tiny_run
    assert load_ontology(out / "ontology.json").is_acyclic()


def test_no_dpo_reuses_sft_planner(tmp_path):
    cfg = tiny_config().with_ablation("no-dpo")
    H.run_pipeline(cfg, tmp_path, stop_after="dpo-c1")
    run = H.Run(cfg, tmp_path)
    np.testing.assert_array_equal(run.planner(1).weights, run.planner(0).weights)
    assert json.loads((tmp_path / "dpo_log_c1.json").read_text())["loss"] == []


def test_no_sft_keeps_initial_planner(tmp_path):
    cfg = tiny_config(cycles=0).with_ablation("no-sft")
    H.run_pipeline(cfg, tmp_path)
    run = H.Run(cfg, tmp_path)
    fz = run.planner(0).featurizer
    init = P.PlannerModel.init(fz, H.derive_seed(cfg.seed, "planner"), cfg.planner.init_scale)
    np.testing.assert_array_equal(run.planner(0).weights, init.weights)


def test_score_weighted_sampling_pipeline(tmp_path):
    agent = dataclasses.replace(H.PipelineConfig().agent, plan_sampling="score")
    cfg = tiny_config(agent=agent)
    H.run_pipeline(cfg, tmp_path, stop_after="train-c1")
    assert (tmp_path / "policy_c1.json").exists()


# -- rank tables -------------------------------------------------------------


def hand_pool():
    """Two instructions over a 5-skill bank, three and four variants each."""
    bank = SubtaskBank([f"s{i}()" for i in range(5)])
    goal_plans = {0: (0, 1), 1: (2,)}
    pool = {
        0: [ExpandedPlan(0, (0, 1), 0), ExpandedPlan(0, (3, 0, 1), 1), ExpandedPlan(0, (0, 4, 1), 2)],
        1: [ExpandedPlan(1, (2,), 0), ExpandedPlan(1, (3, 2), 1), ExpandedPlan(1, (4, 2), 2),
            ExpandedPlan(1, (3, 4, 2), 3)],
    }
    return bank, goal_plans, pool


def report_from(sr):
    return V.ValidationReport([V.PlanResult(i, v, "Combo", s, 10, round(10 * s), None)
                               for (i, v), s in sorted(sr.items())])


HAND_SR = {(0, 0): 0.2, (0, 1): 0.9, (0, 2): 0.5, (1, 0): 0.1, (1, 1): 0.4, (1, 2): 0.3, (1, 3): 0.8}


def separating_planner(pool, goal_plans, sr):
    """A planner driven by preference pairs until its NLL order matches ``sr``."""
    fz = P.PlanFeaturizer(5, 16)
    model = P.PlannerModel.init(fz, 0, 0.0)
    pairs = V.build_preference_pairs(report_from(sr), margin=0.05)
    groups = P.build_groups(fz, pool, goal_plans)
    model, _ = P.dpo_update(model, pairs, groups, beta=0.5, lr=0.5, epochs=200)
    return model


def test_rank_table_identical_checkpoints():
    bank, goal_plans, pool = hand_pool()
    m = P.PlannerModel.init(P.PlanFeaturizer(5, 16), 1, 0.5)
    t = H.export_rank_table([("a", m), ("b", m.copy())], pool, goal_plans, report_from(HAND_SR))
    assert [r["rank_a"] for r in t.rows] == [r["rank_b"] for r in t.rows]
    assert t.spearman["a"] == t.spearman["b"]


def test_rank_table_separable_pool_gives_plus_one():
    _, goal_plans, pool = hand_pool()
    model = separating_planner(pool, goal_plans, HAND_SR)
    init = P.PlannerModel.init(model.featurizer, 0, 0.0)
    t = H.export_rank_table([("init", init), ("fit", model)], pool, goal_plans, report_from(HAND_SR))
    assert t.spearman["fit"] == pytest.approx(1.0, abs=1e-12)
    # a constant scorer has no defined correlation
    assert math.isnan(t.spearman["init"])
    for r in t.rows:
        higher = [q for q in t.rows if q["instruction_id"] == r["instruction_id"] and q["sr"] > r["sr"]]
        assert r["rank_fit"] == len(higher) + 1


def test_rank_table_reversed_gives_minus_one():
    _, goal_plans, pool = hand_pool()
    model = separating_planner(pool, goal_plans, HAND_SR)
    reversed_sr = {k: 1.0 - v for k, v in HAND_SR.items()}
    t = H.export_rank_table([("a", model), ("b", model)], pool, goal_plans, report_from(reversed_sr))
    assert t.spearman["a"] == pytest.approx(-1.0, abs=1e-12)


def test_rank_table_needs_two_checkpoints():
    _, goal_plans, pool = hand_pool()
    m = P.PlannerModel.init(P.PlanFeaturizer(5, 16))
    with pytest.raises(ValueError):
        H.export_rank_table([("a", m)], pool, goal_plans, report_from(HAND_SR))


def test_rank_table_csv(tmp_path):
    _, goal_plans, pool = hand_pool()
    m = P.PlannerModel.init(P.PlanFeaturizer(5, 16), 2, 0.5)
    t = H.export_rank_table([("a", m), ("b", m)], pool, goal_plans, report_from(HAND_SR))
    t.save_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("instruction_id,variant,sr,rank_a,rank_b")
    assert len([ln for ln in lines[1:] if ln and ln[0].isdigit()]) == len(HAND_SR)


def test_mean_spearman_skips_undefined():
    scores = {(0, 0): 1.0, (0, 1): 2.0, (1, 0): 5.0, (1, 1): 5.0, (2, 0): 1.0}
    sr = {(0, 0): 0.1, (0, 1): 0.3, (1, 0): 0.1, (1, 1): 0.9, (2, 0): 0.5}
    assert H.mean_spearman(scores, sr) == pytest.approx(1.0)
    assert math.isnan(H.mean_spearman({(2, 0): 1.0}, {(2, 0): 0.5}))


def test_mean_spearman_matches_naive():
    from oracles import spearman_naive

    rng = np.random.default_rng(5)
    scores, sr, want = {}, {}, []
    for iid in range(6):
        n = int(rng.integers(2, 7))
        a, b = rng.permutation(n).astype(float), rng.permutation(n).astype(float)
        for v in range(n):
            scores[(iid, v)], sr[(iid, v)] = a[v], b[v]
        want.append(spearman_naive(a, b))
    assert H.mean_spearman(scores, sr) == pytest.approx(float(np.mean(want)), abs=1e-12)
