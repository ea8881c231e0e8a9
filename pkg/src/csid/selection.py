"""Hyperparameter search by k-fold CV and Monte-Carlo train/test repeats.

Grid cells and folds are independent, so they can be fanned out over a
process pool. Results are always merged by (cell, fold) position, which keeps
the output identical for any ``n_jobs``.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import DEFAULT_ALPHABET, DataError, Dataset, kfold, split
from .pipeline import FittedModel, encode_training, fit_dataset
from .solver import FitError, SolverConfig, fit, fit_multi_output

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    ranks: tuple = (2, 5, 10, 20, 40)
    rhos: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    mus: tuple = (0.0, 1e-3, 1e-2, 1e-1, 1.0)

    def cells(self) -> list:
        return list(itertools.product(self.ranks, self.rhos, self.mus))

    def __len__(self) -> int:
        return len(self.ranks) * len(self.rhos) * len(self.mus)


DEFAULT_GRID = Grid()


@dataclass
class CVCell:
    rank: int
    rho: float
    mu: float
    fold_rmse: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_rmse))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_rmse))


@dataclass
class CVResult:
    cells: list
    best: CVCell

    def table(self) -> list:
        """Rows of ``(rank, rho, mu, mean_rmse, std_rmse)`` in grid order."""
        return [(c.rank, c.rho, c.mu, c.mean, c.std) for c in self.cells]


@dataclass
class RepeatResult:
    repeat: int
    best: CVCell
    test_rmse: float
    cv: CVResult = field(repr=False)


def _fold_task(args):
    fold, cell, cfg, missing = args
    encoder, tensor, marginals, validation = fold
    rank, rho, mu = cell
    cfg = replace(cfg, rank=rank, rho=rho, mu=mu)
    try:
        if tensor.n_outputs > 1:
            model, report = fit_multi_output(tensor, encoder.schema, cfg, marginals)
        else:
            model, report = fit(tensor, encoder.schema, cfg, marginals)
        return FittedModel(encoder, model, marginals, cfg, report, missing).rmse(validation)
    except (FitError, FloatingPointError) as exc:
        logger.warning("cell %s failed: %s", cell, exc)
        return math.inf


def _map(fun, tasks, n_jobs):
    if n_jobs == 1 or len(tasks) <= 1:
        return [fun(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fun, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))


def cross_validate(data: Dataset, grid: Grid = DEFAULT_GRID,
                   cfg: SolverConfig = SolverConfig(), folds: int = 5, seed=0,
                   alphabet: int = DEFAULT_ALPHABET, missing: str = "drop",
                   n_jobs: int = 1) -> CVResult:
    """Mean validation RMSE of every grid cell over ``folds`` folds.

    Encoders, marginals and aggregated tensors are rebuilt from each training
    fold, so nothing from the validation rows leaks into the codebooks. Ties
    in mean RMSE go to the earliest cell in grid order.
    """
    if len(grid) == 0:
        raise ValueError("empty hyperparameter grid")
    prepared = []
    for train, validation in kfold(data, folds, seed):
        encoder, tensor, marginals = encode_training(train, alphabet, missing)
        prepared.append((encoder, tensor, marginals, validation))
    cells = grid.cells()
    tasks = [(fold, cell, cfg, missing) for cell in cells for fold in prepared]
    scores = _map(_fold_task, tasks, n_jobs)
    results = []
    for c, (rank, rho, mu) in enumerate(cells):
        results.append(CVCell(rank, rho, mu, scores[c * folds : (c + 1) * folds]))
    best = min(results, key=lambda c: c.mean)
    return CVResult(results, best)


def monte_carlo(data: Dataset, grid: Grid = DEFAULT_GRID,
                cfg: SolverConfig = SolverConfig(), repeats: int = 10,
                train_fraction: float = 0.8, folds: int = 5, seed=0,
                alphabet: int = DEFAULT_ALPHABET, missing: str = "drop",
                cv_cfg: Optional[SolverConfig] = None, n_jobs: int = 1,
                mask_fraction: float = 0.0) -> list:
    """Repeated split / tune / refit / test runs.

    Each repeat draws a fresh ``train_fraction`` split, picks the grid cell
    with the lowest CV RMSE on the training part (fitting with ``cv_cfg``,
    default ``cfg``), refits on the whole training part with ``cfg`` and
    scores the test part. ``mask_fraction`` blanks that share of the
    training predictor cells at random before tuning.
    """
    cv_cfg = cfg if cv_cfg is None else cv_cfg
    out = []
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(repeats)):
        split_seed, cv_seed, mask_seed = child.spawn(3)
        train, test = split(data, train_fraction, np.random.default_rng(split_seed))
        if mask_fraction > 0:
            train = mask_cells(train, mask_fraction, np.random.default_rng(mask_seed))
        cv = cross_validate(train, grid, cv_cfg, folds, np.random.default_rng(cv_seed),
                            alphabet, missing, n_jobs)
        best = cv.best
        final = fit_dataset(train, replace(cfg, rank=best.rank, rho=best.rho, mu=best.mu),
                            alphabet, missing)
        score = final.rmse(test)
        logger.info("repeat %d: rank=%d rho=%g mu=%g test rmse %.4f",
                    r, best.rank, best.rho, best.mu, score)
        out.append(RepeatResult(r, best, score, cv))
    return out


def mask_cells(data: Dataset, fraction: float, rng) -> Dataset:
    """Copy of ``data`` with ``fraction`` of the predictor cells set missing."""
    if not 0 <= fraction < 1:
        raise DataError("mask fraction must lie in [0, 1)")
    columns = []
    for kind, col in zip(data.kinds, data.columns):
        hide = rng.random(len(col)) < fraction
        if kind == "categorical":
            col = np.array([None if h else v for v, h in zip(col, hide)], dtype=object)
        else:
            col = np.where(hide, np.nan, np.asarray(col, dtype=float))
        columns.append(col)
    return Dataset(data.names, data.kinds, tuple(columns), data.responses, data.response_names)


def parse_grid(ranks: Sequence[int], rhos: Sequence[float], mus: Sequence[float]) -> Grid:
    return Grid(tuple(int(r) for r in ranks), tuple(float(x) for x in rhos),
                tuple(float(x) for x in mus))
