import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.sparse import csr_matrix

from app.custom_error import InvalidArgumentError, TrainingError
from app.models.collective_models import CollectiveAlgorithm, CollectiveConfig
from app.models.training_models import Dataset, LearningRateSchedule, LossKind, ScheduleKind, TopKState, TrainConfig
from app.services.dataset_services import make_sparse_classification
from app.services.sparse_stream_services import logical_vector
from app.services.topk_sgd_services import GradientOracle, sgd_step, topk_select, train
from app.utils.world_handlers import world_session
from tests.conftest import run_world


def _selected(selection) -> np.ndarray:
    return logical_vector(selection.selected)


# =====================================================================================================
# selection


def test_topk_small_example():
    selection = topk_select([3.0, -5.0, 1.0, 2.0], k=2, bucket_size=4)
    assert not selection.selected.is_dense
    assert selection.selected.indices.tolist() == [0, 1]
    assert selection.selected.values.tolist() == [3.0, -5.0]
    assert selection.residual.tolist() == [0.0, 0.0, 1.0, 2.0]
    assert selection.count == 2


def test_topk_full_bucket_selects_everything():
    v = np.arange(1.0, 9.0)
    selection = topk_select(v, k=4, bucket_size=4)
    np.testing.assert_array_equal(_selected(selection), v)
    assert not selection.residual.any()


def test_topk_matches_full_sort_per_bucket():
    v = np.random.default_rng(0).standard_normal(2048).astype(np.float32)
    selection = topk_select(v, k=8, bucket_size=512)
    assert selection.count == 32
    expected = []
    for start in range(0, 2048, 512):
        bucket = v[start : start + 512]
        expected.extend(start + np.argsort(-np.abs(bucket))[:8])
    assert selection.selected.indices.tolist() == sorted(int(i) for i in expected)


def test_topk_short_last_bucket_and_ties():
    selection = topk_select(np.ones(10), k=3, bucket_size=4)
    # ties go to the lower index; the last bucket only has two entries
    assert selection.selected.indices.tolist() == [0, 1, 2, 4, 5, 6, 8, 9]


def test_topk_reconstructs_and_dominates():
    v = np.random.default_rng(1).standard_normal(1000).astype(np.float32)
    selection = topk_select(v, k=5, bucket_size=100)
    np.testing.assert_array_equal(_selected(selection) + selection.residual, v)
    for start in range(0, 1000, 100):
        kept = np.abs(_selected(selection)[start : start + 100])
        left = np.abs(selection.residual[start : start + 100])
        assert kept[kept > 0].min() >= left.max()


@pytest.mark.parametrize("k, bucket", [(0, 4), (-1, 4), (5, 4)])
def test_topk_rejects(k, bucket):
    with pytest.raises(InvalidArgumentError):
        topk_select(np.ones(8), k=k, bucket_size=bucket)


# =====================================================================================================
# one step


def _tiny_problem():
    return make_sparse_classification(64, 40, n_informative=5, nnz_per_row=6, seed=2)


def test_identical_ranks_double_the_step():
    dataset = _tiny_problem()
    rows = np.arange(16)
    schedule = LearningRateSchedule(kind=ScheduleKind.CONSTANT, initial=0.5)
    cfg = CollectiveConfig(algorithm=CollectiveAlgorithm.SSAR_SPLIT_ALLGATHER)

    def fn(endpoint, average=False):
        oracle = GradientOracle(dataset.features, dataset.labels)
        state = TopKState.initial(40, schedule, topk_per_bucket=3, bucket_size=8)
        return sgd_step(state, oracle, endpoint, cfg, rows, average)

    states, _ = run_world(2, fn)
    oracle = GradientOracle(dataset.features, dataset.labels)
    accumulator = (0.5 * oracle.gradient(np.zeros(40), rows)).astype(np.float32)
    chosen = topk_select(accumulator, 3, 8)

    for state in states:
        np.testing.assert_array_equal(state.model, -2 * _selected(chosen))
        np.testing.assert_array_equal(state.residual, chosen.residual)
        assert state.step == 1 and state.last_selected_count == chosen.count

    averaged, _ = run_world(2, lambda endpoint: fn(endpoint, average=True))
    np.testing.assert_allclose(averaged[0].model, -_selected(chosen), rtol=1e-6)


def test_error_feedback_conserves_gradient_mass():
    dataset = _tiny_problem()
    oracle = GradientOracle(dataset.features, dataset.labels, l2=1e-3)
    schedule = LearningRateSchedule(initial=0.2, decay_steps=10)
    state = TopKState.initial(40, schedule, topk_per_bucket=2, bucket_size=16)
    generated = np.zeros(40)

    with world_session(1) as world:
        endpoint = world.endpoint(0)
        for step in range(30):
            rows = np.arange(step * 8, step * 8 + 8) % 64
            generated += schedule.rate(step) * oracle.gradient(state.model, rows)
            sgd_step(state, oracle, endpoint, CollectiveConfig(), rows)

    applied = -state.model.astype(np.float64)
    np.testing.assert_allclose(applied + state.residual, generated, rtol=1e-4, atol=1e-4 * np.abs(generated).max())


def test_non_finite_gradient_is_a_training_error():
    dataset = Dataset(features=csr_matrix(np.array([[np.nan, 1.0], [1.0, 0.0]])), labels=np.array([1.0, -1.0]))
    oracle = GradientOracle(dataset.features, dataset.labels)
    state = TopKState.initial(2, LearningRateSchedule(), topk_per_bucket=1, bucket_size=2)
    with world_session(1) as world:
        with pytest.raises(TrainingError):
            sgd_step(state, oracle, world.endpoint(0), CollectiveConfig(), np.array([0, 1]))


def test_schedules():
    decaying = LearningRateSchedule(initial=0.1, decay_steps=100)
    assert decaying.rate(0) == 0.1
    assert decaying.rate(100) == pytest.approx(0.05)
    assert LearningRateSchedule(kind=ScheduleKind.CONSTANT, initial=0.3).rate(10**6) == 0.3


def test_oracle_losses():
    dataset = _tiny_problem()
    zero = np.zeros(40)
    assert GradientOracle(dataset.features, dataset.labels).loss(zero) == pytest.approx(math.log(2.0))
    assert GradientOracle(dataset.features, dataset.labels, LossKind.HINGE).loss(zero) == pytest.approx(1.0)
    assert GradientOracle(dataset.features, dataset.labels).gradient(zero, np.arange(8)).shape == (40,)


# =====================================================================================================
# training runs


def _sequential_losses(dataset: Dataset, config: TrainConfig):
    """Plain single-process SGD with the row order and batches train() uses for one rank"""
    oracle = GradientOracle(dataset.features, dataset.labels, config.loss, config.l2)
    rows = np.arange(dataset.num_rows)
    model = np.zeros(dataset.num_features, dtype=np.float32)
    losses = [oracle.loss(model, rows)]
    step = 0
    steps_per_epoch = math.ceil(dataset.num_rows / config.batch_size)
    for epoch in range(1, config.epochs + 1):
        order = rows[np.random.default_rng([config.seed, 0, epoch]).permutation(rows.shape[0])]
        for s in range(steps_per_epoch):
            positions = np.arange(s * config.batch_size, (s + 1) * config.batch_size) % order.shape[0]
            grad = oracle.gradient(model, order[positions])
            model = (model - (config.schedule.rate(step) * grad).astype(np.float32)).astype(np.float32)
            step += 1
        losses.append(oracle.loss(model, rows))
    return losses


@pytest.mark.parametrize("topk", [64, None])
def test_single_rank_reproduces_sequential_sgd(topk):
    dataset = make_sparse_classification(300, 200, seed=4)
    config = TrainConfig(world_size=1, epochs=5, batch_size=10, topk=topk, bucket_size=64, l2=1e-3, seed=7)
    result = train(config, dataset)
    np.testing.assert_allclose(result.global_loss, _sequential_losses(dataset, config), rtol=1e-5)


def test_zero_epochs_reports_initial_model():
    result = train(TrainConfig(world_size=2, epochs=0), make_sparse_classification(40, 30, seed=0))
    assert [(row.epoch, row.rank) for row in result.metrics] == [(0, 0), (0, 1)]
    assert result.global_loss == [pytest.approx(math.log(2.0))]
    assert result.total_bytes == 0


def test_topk_with_quantization_tracks_dense_training():
    dataset = make_sparse_classification(2000, 1000, n_informative=10, seed=0)
    common = dict(world_size=4, epochs=50, batch_size=16, l2=1e-2, seed=0)
    dense = train(TrainConfig(algorithm=CollectiveAlgorithm.DENSE_BASELINE, topk=None, **common), dataset)
    sparse = train(
        TrainConfig(algorithm=CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER, topk=8, bucket_size=512, quant_bits=4, **common),
        dataset,
    )
    assert dense.global_loss[-1] < 0.8 * dense.global_loss[0]
    assert abs(sparse.global_loss[-1] - dense.global_loss[-1]) <= 0.05 * dense.global_loss[-1]


def test_sparse_allreduce_sends_far_fewer_bytes():
    # 10 nonzeros per row, 4 rows per batch over a million features: gradient density below 0.01%
    dataset = make_sparse_classification(40, 1_000_000, n_informative=10, nnz_per_row=10, seed=1)
    common = dict(world_size=4, epochs=1, batch_size=4, topk=None, seed=0)
    sparse = train(TrainConfig(algorithm=CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, **common), dataset)
    dense = train(TrainConfig(algorithm=CollectiveAlgorithm.DENSE_BASELINE, **common), dataset)
    assert sparse.total_bytes * 10 <= dense.total_bytes
    assert sum(row.bytes_sent for row in sparse.metrics) == sparse.total_bytes


def test_training_is_deterministic():
    dataset = make_sparse_classification(200, 300, seed=3)
    config = TrainConfig(world_size=3, epochs=3, batch_size=8, topk=4, bucket_size=32, seed=11)
    first, second = train(config, dataset), train(config, dataset)
    assert [row.model_dump() for row in first.metrics] == [row.model_dump() for row in second.metrics]
    assert first.final_model.tobytes() == second.final_model.tobytes()


def test_hinge_training_makes_progress():
    dataset = make_sparse_classification(400, 100, seed=5)
    result = train(TrainConfig(world_size=2, epochs=10, loss=LossKind.HINGE, topk=8, bucket_size=50), dataset)
    assert result.global_loss[-1] < result.global_loss[0]
    assert result.metrics[-1].accuracy > 0.6


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(topk=600, bucket_size=512)
    with pytest.raises(ValidationError):
        TrainConfig(algorithm=CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE, quant_bits=4)


def test_auto_algorithm_training():
    dataset = make_sparse_classification(200, 500, seed=6)
    result = train(TrainConfig(world_size=4, epochs=2, algorithm=CollectiveAlgorithm.AUTO, topk=4, bucket_size=64), dataset)
    assert len(result.global_loss) == 3
    assert result.total_bytes > 0
