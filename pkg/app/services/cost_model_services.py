from typing import Callable, Dict, List, Optional, Sequence, Union
import logging
import math

import numpy as np
from scipy.special import comb

from app.configs.wire_constants import StageLabels
from app.custom_error import InvalidArgumentError
from app.models.collective_models import CollectiveAlgorithm
from app.models.cost_models import (
    BoundPrediction,
    CostModelParams,
    DensityEstimate,
    DsarLowerBound,
    ProblemShape,
    TraceReport,
    TraceReportRow,
)
from app.models.transport_models import StageTraffic, TraceSummary

logger = logging.getLogger(__name__)

SPARSE_ALLGATHER = "sparse_allgather"

Sampler = Callable[[np.random.Generator], Sequence[np.ndarray]]


def _is_power_of_two(P: int) -> bool:
    return P >= 1 and P & (P - 1) == 0


def _ring_bandwidth_range(N: int, P: int) -> tuple:
    """Dense words a rank sends in a ring allreduce: every chunk but two, over both phases"""
    base = N // P
    widths = [base] * (P - 1) + [N - base * (P - 1)]
    # rank r skips chunk r+1 in the reduce-scatter and chunk r+2 in the allgather
    sent = [2 * N - widths[(r + 1) % P] - widths[(r + 2) % P] for r in range(P)]
    return min(sent), max(sent)


# =====================================================================================================
# BOUNDS
# =====================================================================================================


def predict_bounds(algorithm: Union[CollectiveAlgorithm, str], shape: ProblemShape, params: CostModelParams) -> BoundPrediction:
    """
    Latency and bandwidth bounds of one collective under the alpha-beta model.
    Sparse schedules assume a power-of-two P (folding is charged separately) and an even partition.
    For the sparse allgather, k is the largest per-rank contribution.
    """
    P, N, k = shape.P, shape.N, shape.k
    alpha, beta_d, beta_s = params.alpha, params.beta_d, params.beta_s
    key = algorithm.value if isinstance(algorithm, CollectiveAlgorithm) else str(algorithm)

    if key == CollectiveAlgorithm.AUTO.value:
        raise InvalidArgumentError("auto is a selection rule, predict the algorithm it selects")
    if key != CollectiveAlgorithm.DENSE_BASELINE.value and not _is_power_of_two(P):
        raise InvalidArgumentError(f"sparse bounds need a power-of-two node count, got {P}")

    log_p = math.log2(P)
    l1 = log_p * alpha
    l2 = (P - 1) * alpha + l1
    spread = (P - 1) / P
    dense_reference = 2 * log_p * alpha + 2 * spread * k * beta_s

    if key == CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE.value:
        latency, lower, upper = l1, log_p * k * beta_s, (P - 1) * k * beta_s
    elif key == CollectiveAlgorithm.SSAR_SPLIT_ALLGATHER.value:
        latency, lower, upper = l2, 2 * spread * k * beta_s, P * k * beta_s
    elif key == CollectiveAlgorithm.DSAR_SPLIT_ALLGATHER.value:
        latency, lower, upper = l2, spread * N * beta_d, k * beta_s + spread * N * beta_d
    elif key == CollectiveAlgorithm.DENSE_BASELINE.value:
        fewest, most = _ring_bandwidth_range(N, P) if P > 1 else (0, 0)
        latency, lower, upper = 2 * (P - 1) * alpha, fewest * beta_d, most * beta_d
    elif key == SPARSE_ALLGATHER:
        latency, lower, upper = l1, spread * k * beta_s, (P - 1) * k * beta_s
    else:
        raise InvalidArgumentError(f"unknown algorithm '{key}'")

    return BoundPrediction(algorithm=key, latency=latency, bandwidth_lower=lower, bandwidth_upper=upper, dense_reference=dense_reference)


def dsar_lower_bound(shape: ProblemShape, params: CostModelParams, kappa: float) -> DsarLowerBound:
    """Minimum time of any dynamic sparse allreduce whose result has at least kappa·N entries"""
    if not 0.0 < kappa <= 1.0:
        raise InvalidArgumentError(f"kappa must lie in (0, 1], got {kappa}")
    time = math.log2(shape.P) * params.alpha + kappa * shape.N * params.beta_d
    return DsarLowerBound(time=time, kappa=kappa, max_speedup=2.0 / kappa)


# =====================================================================================================
# EXPECTED DENSITY
# =====================================================================================================


def _check_density_domain(k: int, N: int, P: int) -> None:
    if N < 1 or P < 1:
        raise InvalidArgumentError(f"need N >= 1 and P >= 1, got N={N}, P={P}")
    if not 0 <= k <= N:
        raise InvalidArgumentError(f"k must lie in [0, N], got k={k}, N={N}")


def expected_density_closed_form(k: int, N: int, P: int, method: str = "product") -> float:
    """
    Expected size of the union of P uniformly drawn k-subsets of [0, N).
    method="product" evaluates N·(1 - (1 - k/N)^P) stably; method="inclusion_exclusion" evaluates
    the alternating binomial sum term by term (loses precision for large P).
    """
    _check_density_domain(k, N, P)
    if k == 0:
        return 0.0
    if P == 1 or k == N:
        return float(k)

    q = k / N
    if method == "product":
        value = N * -math.expm1(P * math.log1p(-q))
    elif method == "inclusion_exclusion":
        value = N * sum((-1) ** (i - 1) * comb(P, i, exact=True) * q**i for i in range(1, P + 1))
    else:
        raise InvalidArgumentError(f"unknown closed-form method '{method}'")

    # k <= E[K] <= min(N, P·k) holds exactly; clip rounding noise
    return float(min(max(value, k), min(N, P * k)))


def expected_density_union_bound(probabilities) -> float:
    """
    Distribution-free upper bound on E[K]: sum over coordinates of min(1, sum of the per-node
    inclusion probabilities). `probabilities` has one row per node and one column per coordinate.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise InvalidArgumentError("probabilities must be a (nodes x coordinates) matrix")
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise InvalidArgumentError("inclusion probabilities must lie in [0, 1]")
    return float(np.minimum(1.0, p.sum(axis=0)).sum())


def _uniform_union_sizes(rng: np.random.Generator, trials: int, k: int, N: int, P: int) -> np.ndarray:
    """
    Union sizes of P uniform k-subsets per trial. Subsets come from a vectorised Floyd sampler,
    drawing the smaller of the subset and its complement.
    """
    m = min(k, N - k)
    rows = trials * P
    mask = np.zeros((rows, N), dtype=bool)
    row_ids = np.arange(rows)
    for j in range(N - m, N):
        t = rng.integers(0, j + 1, size=rows)
        choice = np.where(mask[row_ids, t], j, t)
        mask[row_ids, choice] = True
    if m != k:
        mask = ~mask
    return mask.reshape(trials, P, N).any(axis=1).sum(axis=1)


def expected_density_monte_carlo(
    k: int,
    N: int,
    P: int,
    trials: int,
    seed: int = 0,
    sampler: Optional[Sampler] = None,
) -> DensityEstimate:
    """
    Empirical E[K] with its standard error. The default draws k distinct indices per node
    (without replacement); a sampler, given a generator, returns the P index sets of one trial.
    """
    _check_density_domain(k, N, P)
    if trials < 1:
        raise InvalidArgumentError(f"trials must be at least 1, got {trials}")

    if sampler is not None:
        rng = np.random.default_rng(seed)
        sizes = np.array([np.unique(np.concatenate([np.asarray(s).ravel() for s in sampler(rng)])).shape[0] for _ in range(trials)])
    else:
        batch = max(1, min(trials, (1 << 22) // (P * N)))
        batches = math.ceil(trials / batch)
        children = np.random.SeedSequence(seed).spawn(batches)
        sizes = np.concatenate(
            [
                _uniform_union_sizes(np.random.default_rng(child), min(batch, trials - i * batch), k, N, P)
                for i, child in enumerate(children)
            ]
        )

    sizes = sizes.astype(np.float64)
    stderr = float(sizes.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return DensityEstimate(mean=float(sizes.mean()), stderr=stderr, trials=trials)


# =====================================================================================================
# TRACE VALIDATION
# =====================================================================================================


def _stage_cost(row: StageTraffic, params: CostModelParams) -> float:
    return params.alpha * row.messages + params.beta_s * row.pairs + params.beta_d * row.dense_words


def validate_trace(
    summary: TraceSummary,
    algorithm: Union[CollectiveAlgorithm, str],
    shape: ProblemShape,
    params: CostModelParams,
    tolerance: float = 1e-9,
) -> TraceReport:
    """
    Charge every rank alpha per message, beta_s per pair and beta_d per dense word and compare the
    most expensive rank with the predicted bounds. Fold stages are excluded and sparse schedules are
    predicted for the power-of-two core of the world.
    """
    key = algorithm.value if isinstance(algorithm, CollectiveAlgorithm) else str(algorithm)
    P = summary.world_size
    core = P if key == CollectiveAlgorithm.DENSE_BASELINE.value else 1 << (P.bit_length() - 1)
    prediction = predict_bounds(key, shape.model_copy(update={"P": core}), params)

    per_rank: List[float] = []
    per_rank_stages: Dict[int, List[StageTraffic]] = {}
    for rank in range(P):
        stages = [row for row in summary.rank_stages(rank) if not StageLabels.is_fold(row.stage)]
        per_rank_stages[rank] = stages
        per_rank.append(sum(_stage_cost(row, params) for row in stages))

    measured = max(per_rank) if per_rank else 0.0
    critical = per_rank.index(measured) if per_rank else 0
    slack = tolerance * max(1.0, abs(prediction.upper))

    common = dict(algorithm=key, P=P, N=shape.N, k=shape.k, d=shape.d, predicted_lower=prediction.lower, predicted_upper=prediction.upper)
    rows = [
        TraceReportRow(
            stage=row.stage,
            messages=row.messages,
            pair_volume=row.pairs,
            dense_volume=row.dense_words,
            measured=_stage_cost(row, params),
            **common,
        )
        for row in per_rank_stages.get(critical, [])
    ]
    critical_rows = per_rank_stages.get(critical, [])
    rows.append(
        TraceReportRow(
            stage="total",
            messages=sum(r.messages for r in critical_rows),
            pair_volume=sum(r.pairs for r in critical_rows),
            dense_volume=sum(r.dense_words for r in critical_rows),
            measured=measured,
            **common,
        )
    )

    violations = []
    heaviest = max(critical_rows, key=lambda r: _stage_cost(r, params)).stage if critical_rows else "none"
    if measured < prediction.lower - slack:
        violations.append(f"{key}: rank {critical} measured {measured:g} below lower bound {prediction.lower:g} (heaviest stage {heaviest})")
    if measured > prediction.upper + slack:
        violations.append(f"{key}: rank {critical} measured {measured:g} above upper bound {prediction.upper:g} (heaviest stage {heaviest})")
    if violations:
        logger.warning(f"⚠️ Trace outside predicted bounds - {'; '.join(violations)}")

    return TraceReport(
        algorithm=key,
        lower=prediction.lower,
        upper=prediction.upper,
        measured=measured,
        per_rank_measured=per_rank,
        rows=rows,
        violations=violations,
    )


def report_rows(report: TraceReport) -> List[dict]:
    """CSV-ready dicts in the report column order"""
    return [row.model_dump() for row in report.rows]
