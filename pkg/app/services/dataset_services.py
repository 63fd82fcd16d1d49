from typing import List, Optional
import logging

import numpy as np
from scipy.sparse import csr_matrix
from sklearn.datasets import dump_svmlight_file, load_svmlight_file

from app.custom_error import InvalidArgumentError, ServerError
from app.models.training_models import Dataset

logger = logging.getLogger(__name__)


def _signed_labels(labels) -> np.ndarray:
    return np.where(np.asarray(labels) > 0, 1.0, -1.0)


def load_libsvm(path: str, n_features: Optional[int] = None) -> Dataset:
    """libsvm / svmlight text: 1-based indices on disk, 0-based in memory; labels mapped to -1/+1"""
    try:
        features, labels = load_svmlight_file(path, n_features=n_features, zero_based=False)
    except FileNotFoundError:
        logger.error(f"❌ Dataset {path} not found")
        raise InvalidArgumentError(f"dataset {path} not found")
    except ValueError as e:
        logger.error(f"❌ Malformed libsvm file {path} - {str(e)}")
        raise InvalidArgumentError(f"malformed libsvm file {path}: {str(e)}")
    except Exception as e:
        logger.error(f"❌ Failed to read {path} - {str(e)}")
        raise ServerError(f"failed to read {path}")

    logger.info(f"✅ Loaded {features.shape[0]} rows x {features.shape[1]} features from {path}")
    return Dataset(features=csr_matrix(features, dtype=np.float64), labels=_signed_labels(labels), name=str(path))


def dump_libsvm(dataset: Dataset, path: str) -> None:
    dump_svmlight_file(dataset.features, dataset.labels, path, zero_based=False)


def make_sparse_classification(
    n_rows: int,
    n_features: int,
    n_informative: int = 10,
    nnz_per_row: int = 10,
    informative_per_row: int = 3,
    seed: int = 0,
) -> Dataset:
    """
    Linearly separable sparse rows. Coordinates [0, n_informative) carry a hidden weight vector;
    every row mixes a few of them with noise coordinates and is labelled by the sign of the
    hidden score.
    """
    if n_rows < 1 or n_informative < 1 or n_features <= n_informative:
        raise InvalidArgumentError("need at least one row and more features than informative coordinates")
    informative_per_row = min(informative_per_row, n_informative, nnz_per_row)
    noise_per_row = min(nnz_per_row - informative_per_row, n_features - n_informative)

    rng = np.random.default_rng(seed)
    hidden = rng.choice([-1.0, 1.0], size=n_informative) * rng.uniform(0.5, 1.5, size=n_informative)

    indptr = [0]
    indices: List[np.ndarray] = []
    for _ in range(n_rows):
        signal = rng.choice(n_informative, size=informative_per_row, replace=False)
        noise = n_informative + rng.choice(n_features - n_informative, size=noise_per_row, replace=False)
        row = np.sort(np.concatenate([signal, noise]))
        indices.append(row)
        indptr.append(indptr[-1] + row.shape[0])

    columns = np.concatenate(indices)
    data = rng.normal(size=columns.shape[0])
    features = csr_matrix((data, columns, np.asarray(indptr)), shape=(n_rows, n_features))

    scores = features[:, :n_informative] @ hidden
    labels = np.where(scores >= 0.0, 1.0, -1.0)
    return Dataset(features=features, labels=labels, name=f"synthetic-{n_rows}x{n_features}")


def partition_rows(n_rows: int, world_size: int) -> List[np.ndarray]:
    """Contiguous, nearly equal row blocks, one per rank"""
    if n_rows < world_size:
        raise InvalidArgumentError(f"{n_rows} rows cannot feed {world_size} ranks")
    return np.array_split(np.arange(n_rows), world_size)
