import numpy as np
import pandas as pd
import pytest

from flowattack.diffcore import ParamSet
from flowattack.errors import ConditioningError, ContractError, ShapeError, VarianceError
from flowattack.evaluate import (
    EMPTY_MARKER,
    TransferSource,
    lemma1_check,
    offdiag_correlation,
    perturbation_covariance,
    query_stats,
    success_curve,
    transferability,
)
from flowattack.flowmodel import FlowConfig, FlowModel, IndexLayer, MixingLayer
from flowattack.records import AttackRecord, dumps


def _records(variant, queries, success=None, correct=None):
    n = len(queries)
    success = [True] * n if success is None else success
    correct = [True] * n if correct is None else correct
    return [AttackRecord(i, variant, s, q, q + 1, 0.01 if s else 0.0, i, c)
            for i, (q, s, c) in enumerate(zip(queries, success, correct))]


# ---------- query statistics ----------

def test_single_variant_intersection_is_its_own_successes():
    report = query_stats({"advflow": _records("advflow", [200, 400, 600], [True, False, True])})
    assert report.common == [0, 2]
    assert report.summary.loc["advflow", "successes"] == 2


def test_mean_and_lower_median_over_common_successes():
    report = query_stats({
        "a": _records("a", [200, 400, 600, 1000]),
        "b": _records("b", [400, 200, 800, 200]),
    })
    assert report.summary.loc["a", "mean_queries"] == 550
    assert report.summary.loc["a", "median_queries"] == 400
    assert report.summary.loc["b", "mean_queries"] == 400
    assert report.summary.loc["b", "median_queries"] == 200


def test_rates_separate_clean_accuracy():
    recs = _records("a", [200] * 4, success=[True, True, False, True], correct=[True, False, True, True])
    row = query_stats({"a": recs}).summary.loc["a"]
    assert row["success_rate"] == 75.0
    assert row["clean_accuracy"] == 75.0
    assert row["success_rate_correct"] == pytest.approx(200 / 3)


def test_disjoint_successes_give_the_empty_marker():
    report = query_stats({
        "a": _records("a", [200, 200], success=[True, False]),
        "b": _records("b", [200, 200], success=[False, True]),
    })
    assert report.empty
    document = report.to_dict()
    assert document["mutually_successful"] == EMPTY_MARKER
    assert document["n_mutually_successful"] == 0
    assert document["variants"]["a"]["mean_queries"] is None
    assert EMPTY_MARKER in report.to_text()


def test_removing_a_variant_never_shrinks_the_intersection():
    both = query_stats({
        "a": _records("a", [200] * 4, success=[True, True, False, True]),
        "b": _records("b", [200] * 4, success=[True, False, True, True]),
    })
    one = query_stats({"a": _records("a", [200] * 4, success=[True, True, False, True])})
    assert set(both.common) <= set(one.common)


def test_query_stats_contracts():
    with pytest.raises(ContractError):
        query_stats({})
    with pytest.raises(ContractError):
        query_stats({"a": _records("a", [200, 200]), "b": _records("b", [200])})


def test_report_serialization_is_stable():
    results = {"a": _records("a", [200, 400])}
    assert dumps(query_stats(results).to_dict()) == dumps(query_stats(results).to_dict())


def test_success_curve():
    curve = success_curve({"a": _records("a", [100, 300, 900, 50], success=[True, True, True, False])},
                          [100, 500, 1000])
    assert list(curve["a"]) == [25.0, 50.0, 75.0]
    assert curve.index.name == "budget"


# ---------- transfer ----------

def test_transfer_diagonal_and_unfoolable_target():
    labels = np.array([0, 1, 0, 1])
    x_adv = np.array([[1.0], [0.0], [1.0], [1.0]])
    success = np.array([True, True, True, False])

    def source_model(x):
        p1 = np.where(np.asarray(x)[:, 0] > 0.5, 0.9, 0.1)
        return np.stack([1 - p1, p1], axis=1)

    def oracle_of_truth(x):
        return np.eye(2)[labels[success]]

    matrix = transferability([TransferSource("s", x_adv, labels, success)],
                             {"s": source_model, "truth": oracle_of_truth})
    # rows 0, 1, 2 fool the source; row 3 failed and counts only in the denominator
    assert matrix.loc["s", "s"] == 75.0
    assert matrix.loc["s", "truth"] == 0.0


def test_transfer_without_successes_is_zero():
    src = TransferSource("s", np.zeros((2, 1)), np.array([0, 1]), np.array([False, False]))
    matrix = transferability([src], {"t": lambda x: np.full((len(x), 2), 0.5)})
    assert matrix.loc["s", "t"] == 0.0


# ---------- first-order check ----------

def test_lemma_error_vanishes_for_a_permutation_flow():
    flow = FlowModel(FlowConfig(input_shape=(3,)), [IndexLayer(np.array([1, 2, 0]))], ParamSet())
    table = lemma1_check(flow, np.array([0.2, -0.4, 1.0]), np.array([1.0, 0.0, 0.0]))
    assert isinstance(table, pd.DataFrame)
    assert list(table.columns) == ["scale", "error", "error_over_t2"]
    assert table["error"].max() <= 1e-5


def test_lemma_error_vanishes_for_a_linear_flow():
    params = ParamSet()
    mix = MixingLayer("m", (4, 2, 2))
    mix.init(params, np.random.default_rng(0))
    flow = FlowModel(FlowConfig(input_shape=(16,)), [mix], params)
    rng = np.random.default_rng(1)
    direction = rng.normal(size=16)
    table = lemma1_check(flow, rng.normal(size=16), direction / np.linalg.norm(direction))
    assert table["error"].max() <= 1e-5


def test_lemma_error_is_second_order_for_a_nonlinear_flow(random_flow):
    flow = random_flow(dim=2, std=0.5, seed=3)
    table = lemma1_check(flow, np.array([0.3, -0.2]), np.array([0.6, 0.8]), scales=(1e-2, 1e-3, 1e-4))
    ratio = table["error_over_t2"]
    assert ratio.max() / ratio.min() < 10


def test_lemma_contracts(identity_flow):
    with pytest.raises(ConditioningError):
        lemma1_check(identity_flow, np.zeros(2), np.ones(2), max_condition=0.5)
    with pytest.raises(ShapeError):
        lemma1_check(identity_flow, np.zeros(3), np.ones(3))
    with pytest.raises(ContractError):
        lemma1_check(identity_flow, np.zeros(2), np.ones(2), scales=(0.0,))


# ---------- perturbation correlation ----------

def test_isotropic_perturbations_are_uncorrelated():
    deltas = np.random.default_rng(0).normal(size=(1000, 16))
    value, coords = offdiag_correlation(deltas)
    assert value <= 0.1
    assert len(coords) == 16


def test_shared_component_correlates_perturbations():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((16, 16)) + 1.5
    deltas = rng.normal(size=(1000, 16)) @ A.T
    value, _ = offdiag_correlation(deltas)
    assert value >= 0.3


def test_top_coordinates_follow_variance():
    rng = np.random.default_rng(2)
    scale = np.ones(32)
    scale[[3, 7, 30]] = 10.0
    _, coords = offdiag_correlation(rng.normal(size=(200, 32)) * scale, top=3)
    assert list(coords) == [3, 7, 30]


def test_correlation_contracts():
    with pytest.raises(VarianceError):
        offdiag_correlation(np.ones((200, 4)))
    with pytest.raises(ContractError):
        offdiag_correlation(np.random.default_rng(3).normal(size=(50, 4)))


def test_perturbation_covariance_ratio():
    rng = np.random.default_rng(4)
    correlated = rng.normal(size=(500, 8)) @ (rng.standard_normal((8, 8)) + 1.5).T
    isotropic = rng.normal(size=(500, 8))
    summary = perturbation_covariance(correlated, isotropic, top=8)
    assert summary.ratio > 2
    assert summary.to_dict()["coordinates"] == list(range(8))
    with pytest.raises(ShapeError):
        perturbation_covariance(correlated, isotropic[:, :4])


@pytest.mark.slow
def test_lemma_error_is_second_order_on_a_trained_flow(moons, moons_flow):
    for x in moons.data[:5]:
        table = lemma1_check(moons_flow, x, np.array([0.6, 0.8]), scales=(1e-2, 1e-3, 1e-4))
        ratio = table["error_over_t2"]
        assert ratio.max() / ratio.min() < 10


@pytest.mark.slow
def test_advflow_perturbations_are_more_correlated_than_nattack(digits, digits_runs):
    def deltas(variant):
        return np.stack([r.x_adv - x for r, x in zip(digits_runs[variant], digits.x) if r.success])

    summary = perturbation_covariance(deltas("advflow"), deltas("nattack"), min_samples=500)
    assert summary.ratio >= 3
