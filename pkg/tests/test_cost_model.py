import numpy as np
import pytest
from pydantic import ValidationError

from app.custom_error import BoundViolationError, InvalidArgumentError
from app.models.collective_models import CollectiveAlgorithm, CollectiveConfig
from app.models.cost_models import CostModelParams, ProblemShape
from app.models.transport_models import RankTraffic, StageTraffic, TraceSummary
from app.services.cost_model_services import (
    SPARSE_ALLGATHER,
    dsar_lower_bound,
    expected_density_closed_form,
    expected_density_monte_carlo,
    expected_density_union_bound,
    predict_bounds,
    report_rows,
    validate_trace,
)
from app.services.harness_services import run_allreduce, uniform_sparse_inputs

UNIT = CostModelParams(alpha=1.0, beta_d=1.0, beta_s=2.0)


def test_parameter_invariants():
    with pytest.raises(ValidationError):
        CostModelParams(alpha=1.0, beta_d=2.0, beta_s=2.0)
    with pytest.raises(ValidationError):
        CostModelParams(alpha=-1.0)
    with pytest.raises(ValidationError):
        ProblemShape(P=2, N=4, k=5)
    assert ProblemShape(P=4, N=10, k=3).total_nnz_range == (3, 10)


# =====================================================================================================
# bounds


def test_recursive_doubling_bounds():
    prediction = predict_bounds(CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, ProblemShape(P=8, N=4096, k=4), UNIT)
    assert prediction.latency == 3.0
    assert prediction.bandwidth_lower == 12 * UNIT.beta_s
    assert prediction.bandwidth_upper == 28 * UNIT.beta_s
    assert prediction.lower == 3.0 + 24.0


def test_split_allgather_bounds():
    prediction = predict_bounds(CollectiveAlgorithm.SSAR_SPLIT_ALLGATHER, ProblemShape(P=4, N=1024, k=8), UNIT)
    assert prediction.latency == 3 + 2
    assert prediction.bandwidth_lower == pytest.approx(2 * 0.75 * 8 * 2.0)
    assert prediction.bandwidth_upper == 4 * 8 * 2.0


def test_dsar_dense_phase_bound():
    prediction = predict_bounds(CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER, ProblemShape(P=4, N=1024, k=8), UNIT)
    assert prediction.bandwidth_lower == 768 * UNIT.beta_d
    assert prediction.bandwidth_upper == 8 * UNIT.beta_s + 768 * UNIT.beta_d
    assert prediction.dense_reference == pytest.approx(2 * 2 + 2 * 0.75 * 8 * 2.0)


def test_sparse_allgather_bounds():
    prediction = predict_bounds(SPARSE_ALLGATHER, ProblemShape(P=8, N=4096, k=10), UNIT)
    assert prediction.latency == 3.0
    assert prediction.bandwidth_upper == 70 * UNIT.beta_s


def test_ring_bounds_come_from_partition_widths():
    prediction = predict_bounds(CollectiveAlgorithm.DENSE_BASELINE, ProblemShape(P=3, N=10, k=2), UNIT)
    assert prediction.latency == 4.0
    assert (prediction.bandwidth_lower, prediction.bandwidth_upper) == (13.0, 14.0)


@pytest.mark.parametrize(
    "algorithm, P",
    [(CollectiveAlgorithm.AUTO, 4), (CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, 6), ("no_such_algorithm", 4)],
)
def test_predict_bounds_rejects(algorithm, P):
    with pytest.raises(InvalidArgumentError):
        predict_bounds(algorithm, ProblemShape(P=P, N=64, k=4), UNIT)


def test_dsar_lower_bound():
    params = CostModelParams(alpha=0.0, beta_d=1.0, beta_s=2.0)
    shape = ProblemShape(P=8, N=1024, k=16)
    assert dsar_lower_bound(shape, params, 0.5).max_speedup == 4.0
    assert dsar_lower_bound(shape, params, 1.0).max_speedup == 2.0
    assert dsar_lower_bound(shape, params, 0.25).time == 256.0
    with pytest.raises(InvalidArgumentError):
        dsar_lower_bound(shape, params, 0.0)


# =====================================================================================================
# expected density


def test_closed_form_examples():
    assert expected_density_closed_form(7, 100, 1) == 7.0
    assert expected_density_closed_form(2, 4, 2) == pytest.approx(3.0)
    assert expected_density_closed_form(2, 4, 2, method="inclusion_exclusion") == pytest.approx(3.0)
    assert expected_density_closed_form(0, 4, 3) == 0.0
    assert expected_density_closed_form(512, 512, 9) == 512.0


@pytest.mark.parametrize("k, N, P", [(3, 2, 2), (1, 0, 2), (1, 4, 0)])
def test_closed_form_domain(k, N, P):
    with pytest.raises(InvalidArgumentError):
        expected_density_closed_form(k, N, P)


def test_closed_form_methods_agree():
    for k, N, P in [(1, 256, 2), (16, 512, 8), (64, 4096, 16), (100, 300, 5)]:
        product = expected_density_closed_form(k, N, P)
        summed = expected_density_closed_form(k, N, P, method="inclusion_exclusion")
        assert product == pytest.approx(summed, rel=1e-9)


def test_closed_form_is_bounded_and_monotone():
    N = 512
    for P in [1, 2, 4, 8, 16, 64]:
        previous = 0.0
        for k in [1, 2, 8, 32, 128, 512]:
            value = expected_density_closed_form(k, N, P)
            assert k <= value <= min(N, P * k)
            assert value >= previous
            assert value >= expected_density_closed_form(k, N, max(1, P // 2))
            previous = value
    # saturation toward N as P·k grows
    assert expected_density_closed_form(256, N, 16) > 0.999 * N


@pytest.mark.parametrize("P", [2, 4, 8, 16])
@pytest.mark.parametrize("N", [256, 512, 4096])
@pytest.mark.parametrize("k", [1, 4, 16, 64])
def test_closed_form_matches_monte_carlo(k, N, P):
    closed = expected_density_closed_form(k, N, P)
    estimate = expected_density_monte_carlo(k, N, P, trials=2000, seed=k * 1000 + N + P)
    assert estimate.trials == 2000
    assert abs(closed - estimate.mean) <= 4 * estimate.stderr + 1e-3 * closed
    assert estimate.mean <= min(N, P * k)


def test_monte_carlo_small_case():
    estimate = expected_density_monte_carlo(2, 4, 2, trials=100000, seed=1)
    assert abs(estimate.mean - 3.0) < 0.01


def test_monte_carlo_full_support():
    estimate = expected_density_monte_carlo(64, 64, 5, trials=50)
    assert estimate.mean == 64.0 and estimate.stderr == 0.0


def test_monte_carlo_is_reproducible():
    first = expected_density_monte_carlo(8, 512, 4, trials=300, seed=5)
    second = expected_density_monte_carlo(8, 512, 4, trials=300, seed=5)
    assert first == second


def test_monte_carlo_custom_sampler():
    estimate = expected_density_monte_carlo(2, 10, 2, trials=20, sampler=lambda rng: [np.array([0, 1]), np.array([1, 2])])
    assert estimate.mean == 3.0


def test_monte_carlo_rejects_bad_arguments():
    with pytest.raises(InvalidArgumentError):
        expected_density_monte_carlo(5, 4, 2, trials=10)
    with pytest.raises(InvalidArgumentError):
        expected_density_monte_carlo(1, 4, 2, trials=0)


def test_union_bound():
    uniform = np.full((4, 10), 0.2)
    assert expected_density_union_bound(uniform) == pytest.approx(8.0)
    assert expected_density_closed_form(2, 10, 4) <= expected_density_union_bound(uniform)
    assert expected_density_union_bound(np.full((3, 5), 0.9)) == pytest.approx(5.0)
    with pytest.raises(InvalidArgumentError):
        expected_density_union_bound(np.full((2, 3), 1.5))


# =====================================================================================================
# trace validation


def _summary(stages):
    return TraceSummary(world_size=2, ranks=[RankTraffic(rank=0), RankTraffic(rank=1)], stages=stages)


def test_validate_trace_reports_violation_with_stage():
    shape = ProblemShape(P=2, N=64, k=4)
    summary = _summary(
        [
            StageTraffic(rank=0, stage="rd-stage-1", messages=1, pairs=100),
            StageTraffic(rank=1, stage="fold-pre", messages=1, pairs=1000),
            StageTraffic(rank=1, stage="rd-stage-1", messages=1, pairs=4),
        ]
    )
    report = validate_trace(summary, CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, shape, UNIT)
    assert not report.within_bounds
    assert "rd-stage-1" in report.violations[0]
    assert report.per_rank_measured == [1.0 + 200.0, 1.0 + 8.0]
    with pytest.raises(BoundViolationError):
        report.raise_for_violation()


def test_validate_trace_rows():
    P, N, k = 3, 10, 2
    inputs = uniform_sparse_inputs(P, N, k, np.random.default_rng(0))
    _, summary = run_allreduce(inputs, CollectiveConfig(algorithm=CollectiveAlgorithm.DENSE_BASELINE))
    assert sorted(rank.dense_sent for rank in summary.ranks) == [13, 13, 14]

    report = validate_trace(summary, CollectiveAlgorithm.DENSE_BASELINE, ProblemShape(P=P, N=N, k=k), UNIT)
    assert report.within_bounds
    rows = report_rows(report)
    assert rows[-1]["stage"] == "total"
    assert rows[-1]["measured"] == report.measured == 4 * 1.0 + 14 * 1.0
    assert {row["stage"] for row in rows[:-1]} == {"ring-rs-1", "ring-rs-2", "ring-ag-1", "ring-ag-2"}
    assert list(rows[0]) == [
        "algorithm",
        "P",
        "N",
        "k",
        "d",
        "stage",
        "messages",
        "pair_volume",
        "dense_volume",
        "predicted_lower",
        "predicted_upper",
        "measured",
    ]


def test_folded_worlds_are_charged_on_their_core():
    P, N, k = 6, 4096, 8
    inputs = uniform_sparse_inputs(P, N, k, np.random.default_rng(3))
    _, summary = run_allreduce(inputs, CollectiveConfig(algorithm=CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE))
    report = validate_trace(summary, CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, ProblemShape(P=P, N=N, k=k), UNIT)
    # fold stages are not charged; the active core of 4 ranks is
    assert report.lower == predict_bounds(CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, ProblemShape(P=4, N=N, k=k), UNIT).lower
