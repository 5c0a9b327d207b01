import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrbench.metrics import DegenerateWarning
from lrbench.weights import (
    GammaMatrix, Objective, WeightVector, dataset_correlations, evaluate_objective, grid_search,
    optimize_weights, ranking,
)


def synthetic(seed, models=20, datasets=5, dissent=True):
    """Datasets share a latent model quality; the last one ranks models in reverse."""
    rng = np.random.default_rng(seed)
    quality = rng.random(models)
    vals = quality[:, None] + 0.15 * rng.standard_normal((models, datasets))
    if dissent:
        vals[:, -1] = 1 - quality + 0.05 * rng.standard_normal(models)
    vals = np.clip(vals, 0.0, 1.5)
    return GammaMatrix([f"m{i}" for i in range(models)], [f"d{j}" for j in range(datasets)], vals)


def _brute_objective(gm, w, objective):
    """Rank with plain Python sorting, then 1 - 6 sum d^2 / (M(M^2 - 1))."""
    scores = [sum(abs(g * wj) for g, wj in zip(row, w)) / sum(abs(x) for x in w) for row in gm.values]

    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0] * len(v)
        for pos, i in enumerate(order):
            r[i] = pos + 1
        return r

    m = len(scores)
    total = 0.0
    for d, c in objective.terms:
        col = list(gm.column(d))
        d2 = sum((a - b) ** 2 for a, b in zip(ranks(scores), ranks(col)))
        total += c * (1 - 6 * d2 / (m * (m * m - 1)))
    return total


def test_objective_matches_rank_oracle():
    gm = synthetic(7, models=10, datasets=5)
    obj = Objective([("d0", 0.95), ("d2", 1.0), ("d4", 0.5)])
    w = np.full(5, 1.0)
    assert evaluate_objective(gm, w, obj) == pytest.approx(_brute_objective(gm, w, obj), abs=1e-12)


def test_concentrated_weight_gives_coefficient():
    gm = synthetic(1)
    obj = Objective([("d4", 0.7)])
    w = np.zeros(5)
    w[4] = 1.0
    assert evaluate_objective(gm, w, obj) == pytest.approx(0.7)


def test_identical_rankings_give_total():
    rng = np.random.default_rng(3)
    base = rng.random(12)
    gm = GammaMatrix([f"m{i}" for i in range(12)], ["a", "b", "c"],
                     np.stack([base, 2 * base, base ** 2], axis=1))
    obj = Objective([("a", 0.95), ("c", 1.0)])
    for w in ([1, 1, 1], [0.01, 0.5, 1.0]):
        assert evaluate_objective(gm, w, obj) == pytest.approx(1.95)
    wv, trace = optimize_weights(gm, obj, budget=50, seed=0)
    assert trace[-1][2] == pytest.approx(1.95)


def test_unknown_dataset_rejected():
    with pytest.raises(KeyError):
        evaluate_objective(synthetic(0), np.ones(5), Objective([("nope", 1.0)]))


def test_budget_one_returns_its_single_evaluation():
    gm = synthetic(2)
    wv, trace = optimize_weights(gm, Objective([("d4", 1.0)]), budget=1, seed=5)
    assert len(trace) == 1
    assert trace[0][1] == evaluate_objective(gm, wv, Objective([("d4", 1.0)]))


def test_infeasible_bounds():
    with pytest.raises(ValueError):
        optimize_weights(synthetic(0), Objective([("d0", 1.0)]), bounds=(0.5, 0.1))
    with pytest.raises(ValueError):
        optimize_weights(synthetic(0), Objective([("d0", 1.0)]), budget=0)


def test_dissenting_dataset_pulls_its_weight_up():
    gm = synthetic(11)
    obj = Objective([("d4", 1.0)])
    wv, trace = optimize_weights(gm, obj, budget=600, seed=0)
    assert trace[-1][2] >= evaluate_objective(gm, WeightVector.uniform(gm.datasets), obj)
    assert wv["d4"] > max(wv[d] for d in gm.datasets[:-1])


def test_trace_best_so_far_non_decreasing_and_deterministic():
    gm = synthetic(4)
    obj = Objective([("d0", 0.95), ("d4", 1.0)])
    w1, t1 = optimize_weights(gm, obj, budget=300, seed=9)
    w2, t2 = optimize_weights(gm, obj, budget=300, seed=9)
    assert w1.weights == w2.weights and t1 == t2
    best = [b for _, _, b in t1]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert [i for i, _, _ in t1] == list(range(len(t1)))
    assert len(t1) <= 300
    assert all(0.01 <= w <= 1.0 for w in w1.weights.values())


def test_grid_oracle_three_datasets():
    gm = synthetic(5, models=8, datasets=3)
    obj = Objective([("d0", 0.95), ("d2", 1.0)])
    _, grid_best = grid_search(gm, obj, levels=21)
    _, trace = optimize_weights(gm, obj, budget=3000, seed=0)
    assert trace[-1][2] >= grid_best - 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5), st.floats(0.1, 50))
def test_war_ranking_scale_invariant(w, c):
    gm = synthetic(8)
    a = ranking(gm, np.array(w))
    b = ranking(gm, c * np.array(w))
    assert [m for m, _ in a] == [m for m, _ in b]
    np.testing.assert_allclose([s for _, s in a], [s for _, s in b], rtol=1e-12)


def test_weight_vector_io(tmp_path, data_dir):
    wv = WeightVector.load(data_dir / "war16_weights.json")
    assert len(wv) == 15 and min(wv.weights.values()) == 0.01
    wv.save(tmp_path / "w.json")
    assert WeightVector.load(tmp_path / "w.json") == wv
    with pytest.raises(ValueError):
        WeightVector({"a": 2.0})
    with pytest.raises(ValueError):
        WeightVector({"a": 0.0, "b": 0.0}, lo=0.0)


def test_objective_parse():
    o = Objective.parse("imagenet:0.95,eurosat:1")
    assert o.terms == [("imagenet", 0.95), ("eurosat", 1.0)]
    assert Objective().total == pytest.approx(4.85)
    for bad in ("imagenet", "imagenet:0", ":1"):
        with pytest.raises(ValueError):
            Objective.parse(bad)


def test_dataset_correlations():
    gm = synthetic(6)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateWarning)
        corr = dataset_correlations(gm, np.ones(5))
    assert set(corr) == set(gm.datasets)
    assert corr["d0"] > corr["d4"]
