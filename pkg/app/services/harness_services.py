from fastapi import HTTPException
from pathlib import Path
from typing import List, Optional, Tuple
import csv
import io
import logging

import numpy as np
from pydantic import ValidationError

from app.custom_error import InvalidArgumentError, ServerError
from app.models.collective_models import CollectiveAlgorithm, CollectiveConfig
from app.models.cost_models import CostModelParams, ProblemShape
from app.models.run_models import HarnessResult, RunCommand, RunSpec, RunStatus
from app.models.stream_models import SUM, ReductionOp, SparseStream, ValuePrecision
from app.models.training_models import TrainConfig
from app.models.transport_models import BackendKind, TraceSummary
from app.services.collective_services import allreduce, select_algorithm
from app.services.cost_model_services import (
    expected_density_closed_form,
    expected_density_monte_carlo,
    validate_trace,
)
from app.services.dataset_services import load_libsvm, make_sparse_classification
from app.services.sparse_stream_services import from_pairs, logical_vector, non_neutral_count, serialize
from app.services.topk_sgd_services import train
from app.utils.world_handlers import run_ranks, world_session

logger = logging.getLogger(__name__)

BENCH_COLUMNS = [
    "algorithm",
    "P",
    "N",
    "k",
    "d",
    "seeds",
    "repetitions",
    "alpha",
    "beta_d",
    "beta_s",
    "predicted_lower",
    "predicted_upper",
    "measured_q25",
    "measured_median",
    "measured_q75",
    "max_pair_volume",
    "max_dense_volume",
    "median_total_bytes",
    "status",
]

DENSITY_COLUMNS = [
    "P",
    "N",
    "k",
    "d",
    "closed_form",
    "closed_form_density",
    "monte_carlo_mean",
    "monte_carlo_stderr",
    "union_bound",
    "measured_mean",
    "measured_stderr",
    "measured_runs",
    "trials",
]

TRAIN_COLUMNS = [
    "epoch",
    "rank",
    "loss",
    "accuracy",
    "bytes_sent",
    "mean_selected_density",
    "algorithm",
    "P",
    "N",
    "topk",
    "bucket_size",
    "quant_bits",
    "batch",
    "lr",
    "seed",
]


# =====================================================================================================
# BUILDING BLOCKS
# =====================================================================================================


def uniform_sparse_inputs(
    P: int,
    N: int,
    k: int,
    rng: np.random.Generator,
    precision: ValuePrecision = ValuePrecision.F32,
    values: str = "normal",
) -> List[SparseStream]:
    """One stream per rank with k distinct uniformly drawn indices; values normal, small integers or ones"""
    streams = []
    for _ in range(P):
        indices = rng.choice(N, size=k, replace=False)
        if values == "ones":
            data = np.ones(k)
        elif values == "integer":
            data = rng.integers(-8, 9, size=k).astype(np.float64)
        else:
            data = rng.standard_normal(k)
        streams.append(from_pairs(N, indices, data, precision))
    return streams


def dense_oracle(inputs: List[SparseStream], op: ReductionOp = SUM) -> np.ndarray:
    """Reference reduction of the logical vectors, accumulated in float64"""
    reference = logical_vector(inputs[0], op).astype(np.float64)
    for stream in inputs[1:]:
        op.apply(reference, logical_vector(stream, op).astype(np.float64), out=reference)
    return reference


def run_allreduce(
    inputs: List[SparseStream], cfg: CollectiveConfig, backend: Optional[BackendKind] = None
) -> Tuple[List[SparseStream], TraceSummary]:
    """Run one allreduce on a fresh world with one rank per input; returns per-rank results and the trace"""
    with world_session(len(inputs), backend) as world:
        results = run_ranks(world, lambda endpoint: allreduce(inputs[endpoint.rank], cfg, endpoint))
        summary = world.trace_summary()
    return results, summary


def results_match(results: List[SparseStream], reference: np.ndarray, op: ReductionOp = SUM, rtol: float = 1e-5) -> bool:
    """Every replica equals the reference and all replicas are byte-identical"""
    first = serialize(results[0])
    if any(serialize(result) != first for result in results[1:]):
        return False
    scale = float(np.max(np.abs(reference[np.isfinite(reference)]), initial=0.0))
    return bool(np.allclose(logical_vector(results[0], op), reference, rtol=rtol, atol=rtol * max(scale, 1.0)))


def _grid_k(N: int, d: float) -> int:
    return max(1, int(round(d * N)))


# =====================================================================================================
# HARNESS
# =====================================================================================================


class HarnessService:
    def __init__(self, spec: RunSpec):
        self.spec = spec

    def run(self) -> HarnessResult:
        if self.spec.command is RunCommand.BENCH:
            return self.bench()
        if self.spec.command is RunCommand.DENSITY:
            return self.density()
        return self.train()

    def _cost_params(self) -> CostModelParams:
        try:
            return CostModelParams(alpha=self.spec.alpha, beta_d=self.spec.beta_d, beta_s=self.spec.beta_s)
        except ValidationError as e:
            raise InvalidArgumentError(f"invalid cost model parameters: {e.errors()[0]['msg']}")

    def _emit(self, columns: List[str], rows: List[dict], passed: bool) -> HarnessResult:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buffer.getvalue()
        if self.spec.output:
            Path(self.spec.output).write_text(text)
            logger.info(f"✅ Wrote {len(rows)} rows to {self.spec.output}")
        return HarnessResult(csv=text, rows=len(rows), passed=passed)

    # =====================================================================================================
    # BENCH
    # =====================================================================================================

    def bench(self) -> HarnessResult:
        """
        Uniform random sparse inputs per grid point, seed and repetition; every algorithm runs on the
        same inputs, is checked against the dense oracle and charged from its trace.
        """
        try:
            spec = self.spec
            params = self._cost_params()
            rows = []
            passed = True

            for P in spec.world_sizes:
                for N in spec.dimensions:
                    for d in spec.densities:
                        k = _grid_k(N, d)
                        if k > N:
                            logger.warning(f"⚠️ Skipping infeasible grid point P={P} N={N} d={d} (k={k} > N)")
                            continue
                        shape = ProblemShape(P=P, N=N, k=k)
                        runs = [
                            uniform_sparse_inputs(P, N, k, np.random.default_rng([seed, rep, P, N, k]))
                            for seed in spec.seeds
                            for rep in range(spec.repetitions)
                        ]
                        for algorithm in spec.algorithms:
                            row = self._bench_point(algorithm, shape, d, runs, params)
                            passed = passed and row["status"] != RunStatus.INCORRECT.value
                            rows.append(row)

            logger.info(f"✅ Bench finished: {len(rows)} rows, all correct: {passed}")
            return self._emit(BENCH_COLUMNS, rows, passed)

        except Exception as e:
            logger.error(f"❌ Bench failed - {str(e)}")
            if isinstance(e, HTTPException):
                raise e
            raise ServerError("bench run failed")

    def _bench_point(self, algorithm: CollectiveAlgorithm, shape: ProblemShape, d: float, runs: List[List[SparseStream]], params: CostModelParams) -> dict:
        P, N, k = shape.P, shape.N, shape.k
        expected_nnz = k if algorithm is CollectiveAlgorithm.AUTO else None
        cfg = CollectiveConfig(algorithm=algorithm, expected_nnz=expected_nnz)
        charged = select_algorithm(cfg, N, P) if algorithm is CollectiveAlgorithm.AUTO else algorithm

        measured, pairs, dense, total_bytes = [], [], [], []
        correct, within = True, True
        report = None
        for inputs in runs:
            results, summary = run_allreduce(inputs, cfg, self.spec.backend)
            if not results_match(results, dense_oracle(inputs)):
                logger.error(f"❌ {algorithm.value} disagrees with the dense oracle at P={P} N={N} k={k}")
                correct = False
            report = validate_trace(summary, charged, shape, params)
            within = within and report.within_bounds
            total = report.rows[-1]
            measured.append(report.measured)
            pairs.append(total.pair_volume)
            dense.append(total.dense_volume)
            total_bytes.append(summary.total_bytes)

        q25, median, q75 = np.quantile(measured, [0.25, 0.5, 0.75])
        if not correct:
            status = RunStatus.INCORRECT
        elif not within:
            status = RunStatus.BOUND_VIOLATION
        else:
            status = RunStatus.OK

        return {
            "algorithm": algorithm.value,
            "P": P,
            "N": N,
            "k": k,
            "d": d,
            "seeds": ";".join(str(s) for s in self.spec.seeds),
            "repetitions": self.spec.repetitions,
            "alpha": params.alpha,
            "beta_d": params.beta_d,
            "beta_s": params.beta_s,
            "predicted_lower": report.lower,
            "predicted_upper": report.upper,
            "measured_q25": float(q25),
            "measured_median": float(median),
            "measured_q75": float(q75),
            "max_pair_volume": max(pairs),
            "max_dense_volume": max(dense),
            "median_total_bytes": float(np.median(total_bytes)),
            "status": status.value,
        }

    # =====================================================================================================
    # DENSITY
    # =====================================================================================================

    def density(self) -> HarnessResult:
        """Closed form, Monte Carlo and measured size of the reduced result over the grid"""
        try:
            spec = self.spec
            rows = []
            passed = True
            cfg = CollectiveConfig(algorithm=CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE)

            for P in spec.world_sizes:
                for N in spec.dimensions:
                    for d in spec.densities:
                        k = _grid_k(N, d)
                        if k > N:
                            logger.warning(f"⚠️ Skipping infeasible grid point P={P} N={N} d={d} (k={k} > N)")
                            continue
                        closed = expected_density_closed_form(k, N, P)
                        estimate = expected_density_monte_carlo(k, N, P, spec.trials, seed=spec.seeds[0])

                        # all-ones inputs: no cancellation, so the reduced nnz is the union size
                        measured = []
                        for seed in spec.seeds:
                            for rep in range(spec.repetitions):
                                inputs = uniform_sparse_inputs(P, N, k, np.random.default_rng([seed, rep, P, N, k]), values="ones")
                                results, _ = run_allreduce(inputs, cfg, spec.backend)
                                if not results_match(results, dense_oracle(inputs)):
                                    passed = False
                                measured.append(non_neutral_count(results[0]))

                        counts = np.asarray(measured, dtype=np.float64)
                        stderr = float(counts.std(ddof=1) / np.sqrt(counts.shape[0])) if counts.shape[0] > 1 else 0.0
                        rows.append(
                            {
                                "P": P,
                                "N": N,
                                "k": k,
                                "d": d,
                                "closed_form": closed,
                                "closed_form_density": closed / N,
                                "monte_carlo_mean": estimate.mean,
                                "monte_carlo_stderr": estimate.stderr,
                                "union_bound": float(min(N, P * k)),
                                "measured_mean": float(counts.mean()),
                                "measured_stderr": stderr,
                                "measured_runs": int(counts.shape[0]),
                                "trials": spec.trials,
                            }
                        )

            logger.info(f"✅ Density sweep finished: {len(rows)} rows")
            return self._emit(DENSITY_COLUMNS, rows, passed)

        except Exception as e:
            logger.error(f"❌ Density sweep failed - {str(e)}")
            if isinstance(e, HTTPException):
                raise e
            raise ServerError("density run failed")

    # =====================================================================================================
    # TRAIN
    # =====================================================================================================

    def train(self) -> HarnessResult:
        try:
            spec = self.spec
            if spec.dataset:
                dataset = load_libsvm(spec.dataset)
            else:
                dataset = make_sparse_classification(
                    spec.rows, spec.features, n_informative=spec.informative, nnz_per_row=spec.nnz_per_row, seed=spec.seed
                )

            try:
                config = TrainConfig(
                    world_size=spec.world_size,
                    backend=spec.backend,
                    epochs=spec.epochs,
                    batch_size=spec.batch,
                    loss=spec.loss,
                    l2=spec.l2,
                    schedule=spec.lr,
                    topk=spec.topk,
                    bucket_size=spec.bucket_size,
                    algorithm=spec.algorithm,
                    quant_bits=spec.quant_bits,
                    average=spec.average,
                    seed=spec.seed,
                )
            except ValidationError as e:
                raise InvalidArgumentError(f"invalid training configuration: {e.errors()[0]['msg']}")

            result = train(config, dataset)
            parameters = {
                "algorithm": config.algorithm.value,
                "P": config.world_size,
                "N": dataset.num_features,
                "topk": "" if config.topk is None else config.topk,
                "bucket_size": config.bucket_size,
                "quant_bits": "" if config.quant_bits is None else config.quant_bits,
                "batch": config.batch_size,
                "lr": config.schedule.initial,
                "seed": config.seed,
            }
            rows = [{**row.model_dump(), **parameters} for row in result.metrics]
            return self._emit(TRAIN_COLUMNS, rows, True)

        except Exception as e:
            logger.error(f"❌ Training run failed - {str(e)}")
            if isinstance(e, HTTPException):
                raise e
            raise ServerError("training run failed")
