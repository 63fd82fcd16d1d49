from typing import List, Optional, Tuple
import logging
import math

import numpy as np
from scipy.sparse import csr_matrix
from scipy.special import expit

from app.custom_error import InvalidArgumentError, TrainingError
from app.models.collective_models import CollectiveAlgorithm, CollectiveConfig
from app.models.quantization_models import QuantizationScheme
from app.models.stream_models import ValuePrecision
from app.models.training_models import Dataset, EpochMetrics, LossKind, TopKSelection, TopKState, TrainConfig, TrainResult
from app.services.collective_services import allreduce
from app.services.dataset_services import partition_rows
from app.services.sparse_stream_services import from_pairs, logical_vector
from app.services.transport_services import Endpoint
from app.utils.world_handlers import run_ranks, world_session

logger = logging.getLogger(__name__)


# =====================================================================================================
# SELECTION
# =====================================================================================================


def _bucket_topk(block: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|v|: equal magnitudes keep index order, so ties go to the lower index
    return np.argsort(-np.abs(block), axis=-1, kind="stable")[..., :k]


def topk_select(v, k: int, bucket_size: int, precision: ValuePrecision = ValuePrecision.F32) -> TopKSelection:
    """
    Keep the k largest-magnitude entries of every bucket of `bucket_size` consecutive entries
    (all of a short last bucket if it holds fewer). The selection plus the residual is exactly v.
    """
    values = np.asarray(v, dtype=precision.dtype).ravel()
    if k <= 0:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    if bucket_size <= 0 or k > bucket_size:
        raise InvalidArgumentError(f"k={k} must not exceed the bucket size {bucket_size}")
    n = values.shape[0]
    if n == 0:
        raise InvalidArgumentError("cannot select from an empty vector")

    full = n // bucket_size
    chosen = []
    if full:
        blocks = values[: full * bucket_size].reshape(full, bucket_size)
        offsets = (np.arange(full) * bucket_size)[:, None]
        chosen.append((_bucket_topk(blocks, k) + offsets).ravel())
    tail = n - full * bucket_size
    if tail:
        chosen.append(_bucket_topk(values[full * bucket_size :], min(k, tail)) + full * bucket_size)

    indices = np.sort(np.concatenate(chosen))
    residual = values.copy()
    residual[indices] = 0
    selected = from_pairs(n, indices, values[indices], precision)
    return TopKSelection(selected=selected, residual=residual, count=int(indices.shape[0]))


def _select_all(values: np.ndarray, precision: ValuePrecision) -> TopKSelection:
    indices = np.flatnonzero(values)
    selected = from_pairs(values.shape[0], indices, values[indices], precision)
    return TopKSelection(selected=selected, residual=np.zeros_like(values), count=int(indices.shape[0]))


# =====================================================================================================
# GRADIENTS
# =====================================================================================================


class GradientOracle:
    """Minibatch gradients of a regularised linear classifier over sparse rows"""

    def __init__(self, features: csr_matrix, labels: np.ndarray, loss: LossKind = LossKind.LOGISTIC, l2: float = 0.0):
        self.features = csr_matrix(features)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.loss_kind = loss
        self.l2 = l2

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    def _margins(self, model: np.ndarray, rows: Optional[np.ndarray]):
        X = self.features if rows is None else self.features[rows]
        y = self.labels if rows is None else self.labels[rows]
        return X, y, y * (X @ model.astype(np.float64))

    def gradient(self, model: np.ndarray, rows: np.ndarray) -> np.ndarray:
        X, y, margins = self._margins(model, rows)
        if self.loss_kind is LossKind.LOGISTIC:
            coefficients = -y * expit(-margins)
        else:
            coefficients = -y * (margins < 1.0)
        grad = X.T @ coefficients / max(X.shape[0], 1)
        if self.l2:
            grad = grad + self.l2 * model.astype(np.float64)
        return np.asarray(grad).ravel()

    def loss(self, model: np.ndarray, rows: Optional[np.ndarray] = None) -> float:
        X, y, margins = self._margins(model, rows)
        if self.loss_kind is LossKind.LOGISTIC:
            data_loss = np.logaddexp(0.0, -margins).mean()
        else:
            data_loss = np.maximum(0.0, 1.0 - margins).mean()
        return float(data_loss + 0.5 * self.l2 * float(np.dot(model.astype(np.float64), model.astype(np.float64))))

    def accuracy(self, model: np.ndarray, rows: Optional[np.ndarray] = None) -> float:
        _, _, margins = self._margins(model, rows)
        return float(np.mean(margins > 0.0))


# =====================================================================================================
# SGD
# =====================================================================================================


def _step_config(cfg: CollectiveConfig, step: int) -> CollectiveConfig:
    # fresh quantization randomness every step, still fixed by the base seed
    scheme = cfg.quantize_dense_phase
    if scheme is None:
        return cfg
    return cfg.model_copy(update={"quantize_dense_phase": scheme.model_copy(update={"seed": scheme.seed + step})})


def sgd_step(state: TopKState, oracle: GradientOracle, endpoint: Endpoint, cfg: CollectiveConfig, rows: np.ndarray, average: bool = False) -> TopKState:
    """
    One error-feedback iteration on this rank:
    acc = residual + lr·grad, residual = acc - TopK(acc), g = allreduce(TopK(acc)), model -= g.
    Collective: every rank calls it with the same config.
    """
    grad = oracle.gradient(state.model, rows)
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"rank {endpoint.rank}: non-finite gradient at step {state.step}")

    rate = state.schedule.rate(state.step)
    accumulator = (state.residual + rate * grad).astype(state.precision.dtype)

    if state.topk_per_bucket is None:
        selection = _select_all(accumulator, state.precision)
    else:
        selection = topk_select(accumulator, state.topk_per_bucket, state.bucket_size, state.precision)

    reduced = allreduce(selection.selected, _step_config(cfg, state.step), endpoint)
    update = logical_vector(reduced, cfg.reduction)
    if average:
        update = (update / endpoint.world_size).astype(state.precision.dtype)

    state.residual = selection.residual
    state.model = (state.model - update).astype(state.precision.dtype)
    state.last_selected_count = selection.count
    state.step += 1
    return state


def _collective_config(config: TrainConfig, dataset: Dataset) -> CollectiveConfig:
    scheme = None
    if config.quant_bits is not None:
        scheme = QuantizationScheme(bits=config.quant_bits, bucket_size=config.quant_bucket_size, seed=config.seed)

    expected_nnz = None
    if config.algorithm is CollectiveAlgorithm.AUTO:
        N = dataset.num_features
        if config.topk is None:
            per_row = dataset.features.nnz / max(dataset.num_rows, 1)
            expected_nnz = min(N, math.ceil(per_row * config.batch_size))
        else:
            expected_nnz = min(N, config.topk * math.ceil(N / config.bucket_size))

    return CollectiveConfig(algorithm=config.algorithm, precision=config.precision, quantize_dense_phase=scheme, expected_nnz=expected_nnz)


def train(config: TrainConfig, dataset: Dataset) -> TrainResult:
    """
    Data-parallel error-feedback SGD. Rows are split into contiguous blocks, one per rank; every rank
    takes the same number of steps per epoch, wrapping around its block when it is shorter.
    Epoch 0 reports the untrained model.
    """
    P = config.world_size
    blocks = partition_rows(dataset.num_rows, P)
    steps_per_epoch = math.ceil(max(block.shape[0] for block in blocks) / config.batch_size)
    cfg = _collective_config(config, dataset)
    N = dataset.num_features

    def run_rank(endpoint: Endpoint) -> Tuple[List[EpochMetrics], np.ndarray]:
        rank = endpoint.rank
        rows = blocks[rank]
        oracle = GradientOracle(dataset.features, dataset.labels, config.loss, config.l2)
        state = TopKState.initial(N, config.schedule, config.topk, config.bucket_size, config.precision)

        metrics = [_epoch_metrics(0, rank, oracle, state, rows, 0, 0.0)]
        for epoch in range(1, config.epochs + 1):
            order = rows[np.random.default_rng([config.seed, rank, epoch]).permutation(rows.shape[0])]
            bytes_before = endpoint.world.bytes_sent(rank)
            densities = []
            for step in range(steps_per_epoch):
                positions = np.arange(step * config.batch_size, (step + 1) * config.batch_size) % order.shape[0]
                sgd_step(state, oracle, endpoint, cfg, order[positions], config.average)
                densities.append(state.last_selected_count / N)

            row = _epoch_metrics(epoch, rank, oracle, state, rows, endpoint.world.bytes_sent(rank) - bytes_before, float(np.mean(densities)))
            if not math.isfinite(row.loss):
                raise TrainingError(f"rank {rank}: training diverged at epoch {epoch} (loss {row.loss})")
            metrics.append(row)
        return metrics, state.model

    with world_session(P, config.backend) as world:
        outputs = run_ranks(world, run_rank)
        total_bytes = world.trace_summary().total_bytes

    metrics = [row for rank_metrics, _ in outputs for row in rank_metrics]
    metrics.sort(key=lambda row: (row.epoch, row.rank))
    weights = np.array([block.shape[0] for block in blocks], dtype=np.float64)
    global_loss = []
    for epoch in range(config.epochs + 1):
        losses = np.array([row.loss for row in metrics if row.epoch == epoch])
        global_loss.append(float(np.dot(losses, weights) / weights.sum()))

    logger.info(f"✅ Trained {config.epochs} epochs on {P} ranks: loss {global_loss[0]:.4f} -> {global_loss[-1]:.4f}, {total_bytes} bytes sent")
    return TrainResult(metrics=metrics, global_loss=global_loss, total_bytes=total_bytes, final_model=outputs[0][1])


def _epoch_metrics(epoch: int, rank: int, oracle: GradientOracle, state: TopKState, rows: np.ndarray, bytes_sent: int, density: float) -> EpochMetrics:
    return EpochMetrics(
        epoch=epoch,
        rank=rank,
        loss=oracle.loss(state.model, rows),
        accuracy=oracle.accuracy(state.model, rows),
        bytes_sent=bytes_sent,
        mean_selected_density=density,
    )
