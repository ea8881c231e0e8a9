"""End-to-end fitting on raw tables: encode, aggregate, solve, predict."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import (
    DEFAULT_ALPHABET,
    DataError,
    Dataset,
    Encoder,
    MarginalSet,
    aggregate_arrays,
    fit_marginals,
)
from .prediction import predict_batch, rmse
from .solver import FitReport, SolverConfig, fit, fit_multi_output
from .tensor_model import FactorModel

logger = logging.getLogger(__name__)

MISSING_POLICIES = ("expect", "drop")


@dataclass
class FittedModel:
    """Everything needed to predict from raw rows, without the training data."""

    encoder: Encoder
    model: FactorModel
    marginals: MarginalSet
    config: SolverConfig
    report: FitReport
    missing: str = "drop"

    @property
    def schema(self):
        return self.encoder.schema

    def predict(self, data: Dataset) -> np.ndarray:
        """Predictions of shape ``(rows,)``, or ``(rows, K)`` for multi-output models.

        Rows with missing or unseen predictor values use the conditional
        expectation under the stored marginals.
        """
        coords = self.encoder.encode(data)
        if coords.shape[0] == 0:
            k = self.model.n_outputs
            return np.zeros((0,) if k is None else (0, k))
        return predict_batch(self.model, coords, self.marginals)

    def rmse(self, data: Dataset) -> float:
        """RMSE over the rows that have every response value."""
        data = _complete_responses(data)
        pred = self.predict(data)
        target = data.responses
        if self.model.output_factor is None:
            target = target[:, 0]
        return rmse(pred, target)


def _complete_responses(data: Dataset) -> Dataset:
    keep = np.all(np.isfinite(data.responses), axis=1)
    if not keep.all():
        logger.info("dropping %d rows without a response", int((~keep).sum()))
        data = data.take(np.flatnonzero(keep))
    return data


def encode_training(data: Dataset, alphabet: int = DEFAULT_ALPHABET,
                    missing: str = "drop", smoothing: float = 0.0):
    """Fit the encoder and build the aggregated tensor and marginals."""
    if missing not in MISSING_POLICIES:
        raise ValueError(f"missing policy must be one of {MISSING_POLICIES}")
    data = _complete_responses(data)
    if len(data) == 0:
        raise DataError("no training rows with a response")
    encoder = Encoder.fit(data, alphabet)
    coords = encoder.encode(data)
    shape = encoder.schema.shape
    marginals = fit_marginals(coords, shape, smoothing)
    y = data.responses
    if missing == "drop":
        complete = np.all(coords > 0, axis=1)
        if not complete.any():
            raise DataError("every training row has a missing predictor")
        coords, y = coords[complete], y[complete]
    return encoder, aggregate_arrays(coords, y, shape), marginals


def fit_dataset(data: Dataset, cfg: SolverConfig = SolverConfig(),
                alphabet: int = DEFAULT_ALPHABET, missing: str = "drop",
                smoothing: float = 0.0) -> FittedModel:
    """Fit a model to a raw table (single or multi-output by response count)."""
    encoder, tensor, marginals = encode_training(data, alphabet, missing, smoothing)
    schema = encoder.schema
    if tensor.n_outputs > 1:
        model, report = fit_multi_output(tensor, schema, cfg, marginals)
    else:
        model, report = fit(tensor, schema, cfg, marginals)
    return FittedModel(encoder, model, marginals, cfg, report, missing)
