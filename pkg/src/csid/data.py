"""Discretization, aggregation into weight/mean tensors, marginals and splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import optimal_partition

logger = logging.getLogger(__name__)

KINDS = ("categorical", "ordinal", "continuous")
_KIND_ALIASES = {"ordinal-discrete": "ordinal", "ordinal_discrete": "ordinal"}
DEFAULT_ALPHABET = 25


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class DegenerateCodebookError(DataError):
    """Fewer distinct values than requested quantization levels."""


def normalize_kind(kind: str) -> str:
    kind = _KIND_ALIASES.get(kind.strip().lower(), kind.strip().lower())
    if kind not in KINDS:
        raise DataError(f"unknown feature kind {kind!r}; expected one of {KINDS}")
    return kind


# --------------------------------------------------------------------------
# Scalar quantization


@dataclass(frozen=True, eq=False)
class Quantizer:
    """Scalar codebook: reconstruction ``levels`` and decision ``boundaries``.

    Cell ``i`` (1-based) covers ``(boundaries[i-2], boundaries[i-1]]``; a value
    sitting exactly on a boundary goes to the lower cell.
    """

    levels: np.ndarray
    boundaries: np.ndarray
    distortion_trace: tuple = field(default=(), repr=False)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        boundaries = np.asarray(self.boundaries, dtype=float)
        if levels.ndim != 1 or levels.size < 1:
            raise ValueError("levels must be a non-empty vector")
        if boundaries.shape != (levels.size - 1,):
            raise ValueError("need exactly len(levels) - 1 boundaries")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        if np.any(boundaries < levels[:-1]) or np.any(boundaries > levels[1:]):
            raise ValueError("each boundary must lie between its adjacent levels")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "boundaries", boundaries)

    @property
    def size(self) -> int:
        return self.levels.size

    @property
    def distortion(self) -> Optional[float]:
        return self.distortion_trace[-1] if self.distortion_trace else None

    @classmethod
    def from_levels(cls, levels) -> "Quantizer":
        levels = np.asarray(levels, dtype=float)
        return cls(levels, 0.5 * (levels[:-1] + levels[1:]))

    def encode(self, x):
        """1-based cell index for each value of ``x``."""
        return np.searchsorted(self.boundaries, x, side="left") + 1

    def decode(self, idx):
        return self.levels[np.asarray(idx) - 1]


def quantize(q: Quantizer, x: float) -> int:
    """Cell index in ``1..I`` of a single finite value."""
    if not np.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    return int(q.encode(x))


def _initial_levels(values: np.ndarray, n_levels: int) -> np.ndarray:
    probs = (np.arange(n_levels) + 0.5) / n_levels
    levels = np.quantile(values, probs)
    if np.all(np.diff(levels) > 0):
        return levels
    # ties in the sample; interpolating the distinct values keeps levels apart
    distinct = np.unique(values)
    positions = probs * (distinct.size - 1)
    return np.interp(positions, np.arange(distinct.size), distinct)


def _optimal_levels(values: np.ndarray, n_levels: int) -> np.ndarray:
    """Centroids of the MSE-optimal partition of a sample into contiguous groups."""
    u, counts = np.unique(values, return_counts=True)
    shift = u.mean()
    u = u - shift  # centering keeps the prefix-sum costs accurate
    w = np.concatenate([[0.0], np.cumsum(counts)])
    s1 = np.concatenate([[0.0], np.cumsum(counts * u)])
    ends = optimal_partition(w, s1, np.concatenate([[0.0], np.cumsum(counts * u * u)]),
                             n_levels)
    starts = np.concatenate([[0], ends[:-1]])
    return (s1[ends] - s1[starts]) / (w[ends] - w[starts]) + shift


def lloyd_max_fit(values, levels_count: int, max_iters: int = 200, tol: float = 1e-12,
                  init: str = "optimal"):
    """Fit an MSE scalar quantizer to an empirical sample with Lloyd's iteration.

    With ``init="optimal"`` the levels start at the centroids of the
    MSE-optimal contiguous partition of the sample, so Lloyd's iteration
    cannot stall in a poorer fixed point; ``init="quantile"`` seeds them at
    the sample quantiles ``(k + 0.5) / I`` instead. Each iteration puts
    the boundaries at midpoints of adjacent levels, then moves every level to
    the mean of its cell. An empty cell is re-seeded at the midpoint of its
    boundary interval. Iteration stops when the distortion improves by less
    than ``tol``, the partition stops changing, or ``max_iters`` is reached.

    Returns
    -------
    Quantizer
        With ``distortion_trace`` holding the mean squared quantization error
        of every iterate; the last entry is the distortion of the returned
        codebook.

    Raises
    ------
    DegenerateCodebookError
        If the sample has fewer distinct values than ``levels_count``.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("cannot fit a quantizer to an empty sample")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if levels_count < 2:
        raise ValueError("levels_count must be at least 2")
    n_distinct = np.unique(values).size
    if n_distinct < levels_count:
        raise DegenerateCodebookError(
            f"{n_distinct} distinct values cannot support {levels_count} levels"
        )

    lo, hi = values.min(), values.max()
    if init == "optimal":
        levels = _optimal_levels(values, levels_count)
    elif init == "quantile":
        levels = _initial_levels(values, levels_count)
    else:
        raise ValueError(f"unknown init {init!r}")
    boundaries = 0.5 * (levels[:-1] + levels[1:])
    cells = np.searchsorted(boundaries, values, side="left")
    trace = [float(np.mean((values - levels[cells]) ** 2))]

    for _ in range(max_iters):
        counts = np.bincount(cells, minlength=levels_count)
        sums = np.bincount(cells, weights=values, minlength=levels_count)
        new_levels = np.empty(levels_count)
        filled = counts > 0
        new_levels[filled] = sums[filled] / counts[filled]
        if not filled.all():
            edges = np.concatenate([[lo], boundaries, [hi]])
            empty = np.flatnonzero(~filled)
            new_levels[empty] = 0.5 * (edges[empty] + edges[empty + 1])
        new_boundaries = 0.5 * (new_levels[:-1] + new_levels[1:])
        new_cells = np.searchsorted(new_boundaries, values, side="left")
        distortion = float(np.mean((values - new_levels[new_cells]) ** 2))
        unchanged = np.array_equal(new_cells, cells)
        if unchanged and distortion >= trace[-1]:
            # recentring a settled partition only shuffles round-off
            break
        levels, boundaries, cells = new_levels, new_boundaries, new_cells
        trace.append(distortion)
        if unchanged or trace[-2] - trace[-1] < tol:
            break

    return Quantizer(levels, boundaries, tuple(trace))


# --------------------------------------------------------------------------
# Feature schema and encoding


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    alphabet_size: int
    label_map: Optional[dict] = None

    @property
    def smoothness_eligible(self) -> bool:
        return self.kind != "categorical"


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple
    responses: tuple

    @property
    def shape(self) -> tuple:
        return tuple(f.alphabet_size for f in self.features)

    @property
    def names(self) -> tuple:
        return tuple(f.name for f in self.features)

    def smooth_mask(self) -> np.ndarray:
        return np.array([f.smoothness_eligible for f in self.features])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Raw table: predictor columns (float with NaN, or object with None) and responses."""

    names: tuple
    kinds: tuple
    columns: tuple
    responses: np.ndarray
    response_names: tuple = ("y",)

    def __post_init__(self):
        y = np.asarray(self.responses, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "kinds", tuple(normalize_kind(k) for k in self.kinds))
        for name, col in zip(self.names, self.columns):
            if len(col) != y.shape[0]:
                raise DataError(f"column {name!r} has {len(col)} rows, expected {y.shape[0]}")

    def __len__(self) -> int:
        return self.responses.shape[0]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.names,
            self.kinds,
            tuple(np.asarray(c)[rows] for c in self.columns),
            self.responses[rows],
            self.response_names,
        )

    def missing_mask(self) -> np.ndarray:
        return np.column_stack([_missing(c, k) for c, k in zip(self.columns, self.kinds)])


def _missing(col, kind) -> np.ndarray:
    col = np.asarray(col)
    if kind == "categorical":
        return np.array([v is None or (isinstance(v, float) and np.isnan(v)) for v in col])
    return np.isnan(col.astype(float))


class Encoder:
    """Maps raw predictor columns to 1-based cell indices (0 = missing).

    Fit on training rows only; test values go through the frozen codebooks.
    Continuous columns use a Lloyd-Max codebook of ``alphabet`` levels (fewer
    if the training column has fewer distinct values), ordinal columns keep
    their distinct training values as levels, categorical columns get a label
    map. An unseen categorical label encodes as missing.
    """

    def __init__(self, schema: FeatureSchema, quantizers: dict):
        self.schema = schema
        self.quantizers = quantizers

    @classmethod
    def fit(cls, data: Dataset, alphabet=DEFAULT_ALPHABET) -> "Encoder":
        """``alphabet`` is one size for every continuous column or a per-name mapping."""
        features, quantizers = [], {}
        for name, kind, col in zip(data.names, data.kinds, data.columns):
            size = alphabet.get(name, DEFAULT_ALPHABET) if isinstance(alphabet, dict) else alphabet
            observed = np.asarray(col)[~_missing(col, kind)]
            if kind == "categorical":
                labels = sorted({str(v) for v in observed})
                if len(labels) < 2:
                    raise DataError(f"categorical column {name!r} has fewer than 2 labels")
                label_map = {lab: i for i, lab in enumerate(labels, start=1)}
                features.append(FeatureSpec(name, kind, len(labels), label_map))
                continue
            observed = observed.astype(float)
            distinct = np.unique(observed)
            if distinct.size < 2:
                raise DataError(f"column {name!r} has fewer than 2 distinct values")
            if kind == "ordinal" or distinct.size <= size:
                if kind == "continuous":
                    logger.info(
                        "column %r: %d distinct values, size reduced from %d",
                        name, distinct.size, size,
                    )
                q = Quantizer.from_levels(distinct)
            else:
                q = lloyd_max_fit(observed, size)
            quantizers[name] = q
            features.append(FeatureSpec(name, kind, q.size))
        schema = FeatureSchema(tuple(features), tuple(data.response_names))
        return cls(schema, quantizers)

    def encode(self, data: Dataset) -> np.ndarray:
        if tuple(data.names) != self.schema.names:
            raise DataError(
                f"columns {list(data.names)} do not match schema {list(self.schema.names)}"
            )
        out = np.zeros((len(data), len(self.schema.features)), dtype=np.int64)
        for n, (spec, col) in enumerate(zip(self.schema.features, data.columns)):
            missing = _missing(col, spec.kind)
            if spec.kind == "categorical":
                out[:, n] = [
                    0 if m else spec.label_map.get(str(v), 0) for v, m in zip(col, missing)
                ]
            else:
                vals = np.asarray(col, dtype=float)
                codes = self.quantizers[spec.name].encode(np.where(missing, 0.0, vals))
                out[:, n] = np.where(missing, 0, codes)
        return out


# --------------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True, eq=False)
class SparseObservationTensor:
    """COO weight tensor ``W`` and mean-response tensor ``Y``.

    ``coords`` holds 1-based indices, one row per distinct cell. A 0 component
    marks a predictor that was missing for the samples in that row (only
    produced when partially observed samples are aggregated). ``values`` has
    shape ``(nnz, K)``.
    """

    shape: tuple
    coords: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    residual_ss: float = 0.0

    @property
    def nnz(self) -> int:
        return self.coords.shape[0]

    @property
    def n_samples(self) -> int:
        return int(self.weights.sum())

    @property
    def n_outputs(self) -> int:
        return self.values.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(np.any(self.coords == 0))

    def as_dict(self) -> dict:
        """``{cell: (weight, mean_response)}`` with scalar means for K = 1."""
        out = {}
        for c, w, v in zip(self.coords, self.weights, self.values):
            out[tuple(int(i) for i in c)] = (int(w), float(v[0]) if v.size == 1 else v.copy())
        return out


def aggregate_arrays(coords, responses, shape=None) -> SparseObservationTensor:
    """Collapse repeated cells into (multiplicity, mean response) pairs.

    ``residual_ss`` records ``sum_m (y_m - Y(idx_m))^2``, the constant that
    separates the per-sample loss from the aggregated one.
    """
    coords = np.asarray(coords, dtype=np.int64)
    y = np.asarray(responses, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if coords.ndim != 2 or coords.shape[0] != y.shape[0]:
        raise DataError("coords and responses disagree on the number of samples")
    if coords.shape[0] == 0:
        raise DataError("no samples to aggregate")
    if not np.all(np.isfinite(y)):
        raise DataError("responses must be finite")
    if shape is None:
        shape = tuple(int(s) for s in coords.max(axis=0))
    shape = tuple(shape)
    if coords.shape[1] != len(shape):
        raise DataError(f"coords have {coords.shape[1]} modes, shape has {len(shape)}")
    if np.any(coords < 0) or np.any(coords > np.asarray(shape)):
        raise DataError("cell index outside the tensor shape")
    cells, inverse, counts = np.unique(coords, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((cells.shape[0], y.shape[1]))
    np.add.at(sums, inverse, y)
    means = sums / counts[:, None]
    residual = float(np.sum((y - means[inverse]) ** 2))
    return SparseObservationTensor(shape, cells, counts.astype(np.int64), means, residual)


def aggregate(samples, shape=None) -> SparseObservationTensor:
    """Aggregate ``(cell_index, response)`` pairs; ``None`` marks a missing index."""
    samples = list(samples)
    coords = [[0 if i is None else i for i in idx] for idx, _ in samples]
    responses = [np.atleast_1d(np.asarray(r, dtype=float)) for _, r in samples]
    lengths = {r.size for r in responses}
    if len(lengths) > 1:
        raise DataError(f"inconsistent response lengths {sorted(lengths)}")
    return aggregate_arrays(coords, np.vstack(responses) if responses else [], shape)


# --------------------------------------------------------------------------
# Marginals


@dataclass(frozen=True, eq=False)
class MarginalSet:
    """Per-mode PMFs ``p_n`` of a rank-one (independent) joint model."""

    pmfs: tuple

    def __post_init__(self):
        pmfs = []
        for n, p in enumerate(self.pmfs, start=1):
            p = np.asarray(p, dtype=float)
            if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"marginal {n} is not a probability vector")
            pmfs.append(p)
        object.__setattr__(self, "pmfs", tuple(pmfs))

    def __len__(self):
        return len(self.pmfs)

    def __getitem__(self, n):
        return self.pmfs[n]


def fit_marginals(samples, shape, smoothing: float = 0.0) -> MarginalSet:
    """Empirical first-order marginals of each mode.

    ``samples`` is an ``(M, N)`` array (or list of tuples) of 1-based indices;
    0 / ``None`` entries are skipped. ``smoothing`` adds a pseudo-count to every
    value.
    """
    coords = np.array(
        [[0 if i is None else i for i in s] for s in samples], dtype=np.int64
    ).reshape(-1, len(shape))
    if coords.shape[0] == 0:
        raise DataError("cannot fit marginals to an empty sample")
    pmfs = []
    for n, size in enumerate(shape):
        col = coords[:, n]
        counts = np.bincount(col[col > 0] - 1, minlength=size)[:size].astype(float)
        counts += smoothing
        total = counts.sum()
        if total <= 0:
            raise DataError(f"mode {n + 1} has no observed values")
        p = counts / total
        pmfs.append(p / p.sum())
    return MarginalSet(tuple(pmfs))


# --------------------------------------------------------------------------
# Splits


def _take(samples, idx):
    if isinstance(samples, (int, np.integer)):
        return idx
    if isinstance(samples, np.ndarray):
        return samples[idx]
    if isinstance(samples, Dataset):
        return samples.take(idx)
    return [samples[i] for i in idx]


def _count(samples) -> int:
    return int(samples) if isinstance(samples, (int, np.integer)) else len(samples)


def split(samples, train_fraction: float = 0.8, seed=None):
    """Random train/test partition.

    ``samples`` may be a sequence, array or :class:`Dataset`, or an integer
    ``n`` in which case index arrays over ``range(n)`` are returned.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = _count(samples)
    if n < 2:
        raise DataError("need at least 2 samples to split")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return _take(samples, train), _take(samples, test)


def kfold(samples, k: int = 5, seed=None):
    """``k`` (train, validation) pairs with disjoint validation folds covering all rows."""
    if k < 2:
        raise ValueError("k must be at least 2")
    n = _count(samples)
    if n < k:
        raise DataError(f"cannot make {k} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    folds = []
    for val in np.array_split(perm, k):
        train = np.setdiff1d(perm, val)
        folds.append((_take(samples, train), _take(samples, np.sort(val))))
    return folds
