"""Model queries: full cells, cells with missing predictors, and RMSE."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .data import MarginalSet
from .tensor_model import FactorModel, check_index, row_products


class ConfigurationError(ValueError):
    """A query needs marginals the caller did not supply."""


def _output(model: FactorModel, products: np.ndarray):
    if model.output_factor is None:
        return products.sum(axis=-1)
    return products @ model.output_factor.T


def predict(model: FactorModel, idx: Sequence[int]):
    """Model value at a fully observed 1-based cell.

    Scalar for single-output models, a length-``K`` vector when the model has
    an output factor.
    """
    rows = check_index(model, idx)
    prod = np.ones(model.rank)
    for a, r in zip(model.factors, rows):
        prod = prod * a[r]
    out = _output(model, prod)
    return float(out) if model.output_factor is None else out


def predict_partial(model: FactorModel, pidx: Sequence[Optional[int]],
                    marginals: Optional[MarginalSet] = None):
    """Conditional expectation of the model given the observed predictors.

    ``pidx`` holds 1-based indices with ``None`` for missing predictors. Under
    the rank-one joint PMF the missing predictors are independent of the
    observed ones, so each missing mode collapses to ``p_n^T A_n`` and the
    result is ``sum_f prod_obs A_n(i_n, f) prod_miss p_n^T A_n(:, f)``.
    """
    if len(pidx) != model.ndim:
        raise IndexError(f"index has {len(pidx)} components, model has {model.ndim} modes")
    missing = [n for n, i in enumerate(pidx) if i is None]
    if missing and marginals is None:
        raise ConfigurationError("predicting with missing predictors requires marginals")
    observed = [1 if i is None else i for i in pidx]
    rows = check_index(model, observed)
    prod = np.ones(model.rank)
    for n, (a, r) in enumerate(zip(model.factors, rows)):
        if pidx[n] is None:
            p = np.asarray(marginals[n], dtype=float)
            if p.shape != (a.shape[0],):
                raise ConfigurationError(f"marginal for mode {n + 1} has the wrong length")
            prod = prod * (p @ a)
        else:
            prod = prod * a[r]
    out = _output(model, prod)
    return float(out) if model.output_factor is None else out


def predict_batch(model: FactorModel, coords, marginals: Optional[MarginalSet] = None):
    """Vectorized :func:`predict_partial` over rows of 1-based coords (0 = missing)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, model.ndim)
    if np.any(coords == 0) and marginals is None:
        raise ConfigurationError("predicting with missing predictors requires marginals")
    return _output(model, row_products(model, coords, marginals))


def rmse(predictions, targets) -> float:
    """Root mean squared error; vector outputs are pooled over all components."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))
