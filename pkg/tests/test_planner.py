import math

import numpy as np
import pytest

from cotrain import planner as P
from cotrain.ontology import ExpandedPlan
from oracles import central_fd, random_planner_instance, rel_err

FZ = P.PlanFeaturizer(5, 16)


def _group(iid, goals, plan_steps, fz=FZ):
    plans = [ExpandedPlan(iid, tuple(s), v) for v, s in enumerate(plan_steps)]
    return P.CandidateGroup(iid, tuple(goals), plans, P.candidate_matrix(fz, goals, plans))


# -- features and NLL ----------------------------------------------------------

def test_feature_layout():
    f = FZ.featurize([2], [0, 1, 2])
    B = 5
    assert f.shape == (FZ.size,) == (3 * B + 3 + 16,)
    assert list(f[:B]) == [1, 1, 1, 0, 0]
    assert f[B] == pytest.approx(3 / 5) and f[B + 1] == 1.0
    assert f[B + 2:B + 2 + 16].sum() == 2
    assert f[B + 2 + 16 + 2] == 1.0
    assert f[-1] == 1.0
    assert np.array_equal(f, FZ.featurize([2], [0, 1, 2]))
    assert not np.array_equal(f, FZ.featurize([2], [1, 0, 2]))


def test_nll_examples():
    g = _group(0, [1], [[1]])
    assert P.nll(P.PlannerModel(FZ, np.ones(FZ.size)), g.feats, 0) == pytest.approx(0.0)
    feats = np.ones((2, FZ.size))
    model = P.PlannerModel(FZ, np.full(FZ.size, 0.3))
    assert P.nll(model, feats, 0) == pytest.approx(math.log(2), abs=1e-12)
    zero = P.PlannerModel(FZ, np.zeros(FZ.size))
    g = _group(0, [1], [[1], [0, 1], [2, 1], [3, 1]])
    assert np.allclose(P.nll_all(zero, g.feats), math.log(4))
    with pytest.raises(ValueError):
        P.log_probs(zero.weights, np.zeros((0, FZ.size)))


def test_softmax_normalized_and_stable():
    rng = np.random.default_rng(0)
    for _ in range(20):
        feats = rng.normal(size=(int(rng.integers(1, 8)), FZ.size)) * 50
        lp = P.log_probs(rng.normal(size=FZ.size) * 50, feats)
        assert np.all(np.isfinite(lp)) and np.exp(lp).sum() == pytest.approx(1.0)
        assert np.all(-lp >= -1e-12)


# -- SFT -----------------------------------------------------------------------

def test_sft_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        _, w, groups = random_planner_instance(rng)
        _, g = P.sft_loss_and_grad(w, groups)
        fd = central_fd(lambda x: P.sft_loss_and_grad(x, groups)[0], w)
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-5


def test_sft_single_candidate_is_fixed_point():
    g = _group(0, [1], [[1]])
    model = P.PlannerModel.init(FZ, seed=1)
    out, hist = P.sft_fit(model, {0: g}, epochs=10)
    assert hist[0] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(out.weights, model.weights, atol=1e-12)


def test_sft_decreases_loss_to_uniform_entropy():
    g = _group(0, [2], [[0, 1, 2], [1, 0, 2], [1, 2]])
    model = P.PlannerModel.init(FZ, seed=3, scale=0.5)
    out, hist = P.sft_fit(model, {0: g}, epochs=300, lr=0.1)
    assert hist[-1] <= hist[0]
    assert hist[-1] >= math.log(3) - 1e-9
    assert hist[-1] == pytest.approx(math.log(3), abs=1e-2)


def test_sft_divergence_raises():
    g = _group(0, [2], [[0, 1, 2], [1, 0, 2], [1, 2]])
    # a negative step size climbs the loss every epoch
    with pytest.raises(P.TrainingError) as err:
        P.sft_fit(P.PlannerModel.init(FZ, seed=3, scale=0.5), {0: g}, epochs=50, lr=-0.5)
    assert "history" in err.value.diagnostics


# -- DPO -----------------------------------------------------------------------

def test_dpo_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(50):
        _, w, groups = random_planner_instance(rng)
        g = groups[int(rng.integers(len(groups)))]
        a, b = rng.choice(len(g.plans), size=2, replace=False)
        pair = P.PreferencePair(g.instruction_id, int(a), int(b), 0.9, 0.1)
        _, grad = P.dpo_loss_and_grad(w, g, pair, 0.5)
        fd = central_fd(lambda x: P.dpo_loss_and_grad(x, g, pair, 0.5)[0], w)
        worst = max(worst, rel_err(grad, fd))
    assert worst < 1e-5


def test_dpo_loss_is_log_partition_free():
    """The closed-form loss agrees with -log sigmoid(beta * (log pi+ - log pi-))."""
    rng = np.random.default_rng(5)
    _, w, groups = random_planner_instance(rng)
    g = groups[0]
    pair = P.PreferencePair(g.instruction_id, 0, 1, 1.0, 0.0)
    lp = P.log_probs(w, g.feats)
    ref = -math.log(1 / (1 + math.exp(-0.5 * (lp[0] - lp[1]))))
    assert P.dpo_loss_and_grad(w, g, pair, 0.5)[0] == pytest.approx(ref, rel=1e-12)


def test_dpo_equal_logits_gives_ln2():
    g = _group(0, [2], [[0, 1, 2], [1, 0, 2]])
    pair = P.PreferencePair(0, 0, 1, 0.8, 0.2)
    loss, _ = P.dpo_loss_and_grad(np.zeros(FZ.size), g, pair, 0.5)
    assert abs(loss - math.log(2)) < 1e-9


def test_dpo_step_widens_gap_on_every_pair():
    rng = np.random.default_rng(8)
    for _ in range(50):
        fz, w, groups = random_planner_instance(rng)
        g = groups[0]
        a, b = rng.choice(len(g.plans), size=2, replace=False)
        pair = P.PreferencePair(g.instruction_id, int(a), int(b), 0.9, 0.1)
        model = P.PlannerModel(fz, w)
        new, _ = P.dpo_update(model, [pair], {g.instruction_id: g}, beta=0.5, lr=1e-2)
        assert P.dpo_margin(new.weights, g, pair) > P.dpo_margin(w, g, pair)
        assert new.version == model.version + 1


def test_dpo_errors():
    g = _group(0, [2], [[0, 1, 2], [1, 0, 2]])
    model = P.PlannerModel(FZ, np.zeros(FZ.size))
    with pytest.raises(ValueError):
        P.dpo_update(model, [], {0: g})
    bad = P.PlannerModel(FZ, np.full(FZ.size, np.nan))
    with pytest.raises(P.TrainingError):
        P.dpo_update(bad, [P.PreferencePair(0, 0, 1, 1.0, 0.0)], {0: g})


def test_log_sigmoid_extremes():
    assert P.log_sigmoid(0.0) == pytest.approx(-math.log(2))
    assert P.log_sigmoid(800.0) == pytest.approx(0.0)
    assert P.log_sigmoid(-800.0) == pytest.approx(-800.0)
    assert P.sigmoid(-800.0) == pytest.approx(0.0) and P.sigmoid(800.0) == 1.0


# -- re-ranking and checkpoints --------------------------------------------------

def _pool():
    pool = {0: [ExpandedPlan(0, s, v) for v, s in enumerate([(0, 1, 2), (1, 0, 2), (1, 2)])],
            1: [ExpandedPlan(1, (3,), 0)]}
    return pool, {0: (2,), 1: (3,)}


def test_reprioritize_keeps_lowest_nll():
    pool, goals = _pool()
    model = P.PlannerModel.init(FZ, seed=4, scale=1.0)
    table = P.nll_table(model, pool, goals)
    kept = P.reprioritize(model, pool, goals, k=2)
    expect = sorted(pool[0], key=lambda p: (table[(0, p.variant)], p.variant))[:2]
    assert kept[0] == expect and kept[1] == pool[1]
    full = P.reprioritize(model, pool, goals, k=10)
    assert sorted(p.variant for p in full[0]) == [0, 1, 2]
    with pytest.raises(ValueError):
        P.reprioritize(model, pool, goals, k=0)


def test_reprioritize_ties_by_variant():
    pool, goals = _pool()
    zero = P.PlannerModel(FZ, np.zeros(FZ.size))
    assert [p.variant for p in P.reprioritize(zero, pool, goals, k=3)[0]] == [0, 1, 2]


def test_checkpoint_roundtrip(tmp_path):
    model = P.PlannerModel.init(FZ, seed=9)
    model.version = 3
    P.save_planner(tmp_path / "m.json", model)
    back = P.load_planner(tmp_path / "m.json")
    assert back.version == 3 and np.array_equal(back.weights, model.weights)
    doc = model.to_json()
    doc["pair_cap"] = 8
    with pytest.raises(ValueError):
        P.PlannerModel.from_json(doc)


def test_pairs_roundtrip(tmp_path):
    pairs = [P.PreferencePair(0, 1, 2, 0.75, 0.25), P.PreferencePair(4, 0, 3, 1.0, 0.0)]
    P.save_pairs(tmp_path / "p.jsonl", pairs)
    assert P.load_pairs(tmp_path / "p.jsonl") == pairs


def test_init_deterministic():
    a = P.PlannerModel.init(FZ, seed=2)
    assert np.array_equal(a.weights, P.PlannerModel.init(FZ, seed=2).weights)
    assert not np.array_equal(a.weights, P.PlannerModel.init(FZ, seed=3).weights)
    assert not P.PlannerModel.init(FZ, seed=2, scale=0.0).weights.any()
