"""Alternating least squares for smooth, weighted CPD tensor completion.

Minimizes

    (1/M) sum_cells W (Y - X)^2 + rho sum_n ||A_n||^2 + sum_n mu_n ||T_n A_n||^2

one factor row at a time. Every row update is the exact minimizer of its
block, so the objective never increases. Scalar responses are handled as the
``K = 1`` case of the stacked multi-output model with the output factor pinned
to ones (a single output row is a pure column rescaling of the last factor).

Cells whose coordinates contain 0 (missing predictor) are fitted through the
conditional expectation under the rank-one PMF: the missing factor row is
replaced by ``p_n^T A_n``. This keeps each row subproblem linear least squares.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg.lapack import dposv as _posv

from ._kernels import sweep_modes
from .data import MarginalSet, SparseObservationTensor, fit_marginals
from .tensor_model import FactorModel

logger = logging.getLogger(__name__)

DIFFERENCES = ("first", "second")
ENGINES = ("compiled", "numpy")
# above this rank, per-row BLAS products beat materializing all outer products
_OUTER_RANK_LIMIT = 8


class FitError(RuntimeError):
    """Every restart ended with non-finite factors."""


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters and stopping rule for :func:`fit`.

    ``mu`` is either one value shared by all smoothness-eligible modes or a
    per-mode sequence; categorical modes always get 0. ``mu_output`` smooths
    the output factor of multi-output models.
    """

    rank: int = 5
    rho: float = 1e-3
    mu: Union[float, Sequence[float]] = 0.0
    difference: str = "first"
    max_sweeps: int = 500
    rel_tol: float = 1e-6
    restarts: int = 1
    init_scale: float = math.sqrt(3.0)
    seed: Optional[int] = 0
    normalize: bool = True
    mu_output: float = 0.0
    engine: str = "compiled"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if self.rho < 0 or self.mu_output < 0 or np.any(np.asarray(self.mu) < 0):
            raise ValueError("regularization weights must be non-negative")
        if self.difference not in DIFFERENCES:
            raise ValueError(f"difference must be one of {DIFFERENCES}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}")
        if self.restarts < 1 or self.max_sweeps < 0:
            raise ValueError("restarts must be >= 1 and max_sweeps >= 0")

    def mode_mu(self, n_modes: int, smooth_mask=None) -> np.ndarray:
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (n_modes,)).copy()
        if smooth_mask is not None:
            mu[~np.asarray(smooth_mask, dtype=bool)] = 0.0
        return mu


@dataclass
class FitReport:
    objective_trace: list
    sweeps: int
    restart: int
    restart_objectives: list
    converged: bool
    fallback_solves: int = 0

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def to_dict(self) -> dict:
        return {
            "objective_trace": [float(x) for x in self.objective_trace],
            "sweeps": self.sweeps,
            "restart": self.restart,
            "restart_objectives": [float(x) for x in self.restart_objectives],
            "converged": self.converged,
            "fallback_solves": self.fallback_solves,
        }


def smoothness_matrix(kind: str, size: int) -> np.ndarray:
    """First- or second-difference operator ``T`` for a mode with ``size`` rows."""
    if kind == "first":
        stencil = (1.0, -1.0)
    elif kind == "second":
        stencil = (-1.0, 2.0, -1.0)
    else:
        raise ValueError(f"unknown difference operator {kind!r}")
    rows = max(size - len(stencil) + 1, 0)
    t = np.zeros((rows, size))
    for r in range(rows):
        t[r, r : r + len(stencil)] = stencil
    return t


def _schema_mask(schema, n_modes):
    if schema is None:
        return None
    mask = schema.smooth_mask() if hasattr(schema, "smooth_mask") else np.asarray(schema)
    if len(mask) != n_modes:
        raise ValueError(f"schema describes {len(mask)} modes, data has {n_modes}")
    return mask


def marginals_from_tensor(data: SparseObservationTensor) -> MarginalSet:
    """Empirical marginals over the samples behind an aggregated tensor."""
    coords = np.repeat(data.coords, data.weights, axis=0)
    return fit_marginals(coords, data.shape)


class _Problem:
    """Data, penalties and mutable factors for one ALS run."""

    def __init__(self, data, cfg, smooth_mask, marginals, learn_output):
        self.data = data
        self.cfg = cfg
        self.coords = data.coords - 1  # -1 marks a missing component
        self.w = data.weights.astype(float)
        self.y = data.values
        self.scale = 1.0 / data.n_samples if cfg.normalize else 1.0
        self.shape = tuple(data.shape)
        self.n_modes = len(self.shape)
        self.mu = cfg.mode_mu(self.n_modes, smooth_mask)
        self.learn_output = learn_output
        self.fallbacks = 0

        self.pmfs = None
        if data.has_missing:
            if marginals is None:
                marginals = marginals_from_tensor(data)
            self.pmfs = [np.asarray(p, dtype=float) for p in marginals.pmfs]

        self.penalty = [
            smoothness_matrix(cfg.difference, size) for size in self.shape
        ]
        self.gram_penalty = [t.T @ t for t in self.penalty]
        k_out = self.y.shape[1]
        self.penalty_out = smoothness_matrix(cfg.difference, k_out)
        self.gram_penalty_out = self.penalty_out.T @ self.penalty_out

        self.groups = []
        for k in range(self.n_modes):
            col = self.coords[:, k]
            observed = np.flatnonzero(col >= 0)
            order = observed[np.argsort(col[observed], kind="stable")]
            bounds = np.searchsorted(col[order], np.arange(self.shape[k] + 1))
            missing = np.flatnonzero(col < 0)
            self.groups.append((order, bounds, missing))
        self.missing_any = [g[2].size > 0 for g in self.groups]
        self.offsets = np.concatenate([[0], np.cumsum(self.shape)]).astype(np.int64)
        if cfg.engine == "compiled":
            self._compile_layout()

    def _compile_layout(self):
        n, sizes = self.n_modes, np.array(self.shape, dtype=np.int64)
        width = int(sizes.max())
        rows = np.where(self.coords >= 0, self.coords + self.offsets[:-1],
                        self.offsets[-1] + np.arange(n))
        order = np.empty((n, self.coords.shape[0]), dtype=np.int64)
        bounds = np.zeros((n, width + 2), dtype=np.int64)
        for k in range(n):
            key = np.where(self.coords[:, k] >= 0, self.coords[:, k], self.shape[k])
            order[k] = np.argsort(key, kind="stable")
            bounds[k, : self.shape[k] + 2] = np.searchsorted(
                key[order[k]], np.arange(self.shape[k] + 2)
            )
        dg = np.zeros((n, width, width))
        pmf = np.zeros((n, width))
        for k in range(n):
            dg[k, : self.shape[k], : self.shape[k]] = self.gram_penalty[k]
            if self.pmfs is not None:
                pmf[k, : self.shape[k]] = self.pmfs[k]
        self.layout = (sizes, np.ascontiguousarray(rows, dtype=np.int64), order, bounds,
                       self.scale * self.w, dg, pmf)

    # -- state -------------------------------------------------------------

    def load(self, model: FactorModel):
        # one stacked buffer, plus a virtual row per mode for the compiled sweep
        self.stack = np.zeros((self.offsets[-1] + self.n_modes, model.rank))
        self.factors = []
        for n, a in enumerate(model.factors):
            view = self.stack[self.offsets[n] : self.offsets[n + 1]]
            view[:] = a
            self.factors.append(view)
        self.eye = np.eye(model.rank)
        if self.learn_output:
            self.output = np.array(model.output_factor)
        else:
            self.output = np.ones((1, model.rank))

    def model(self, with_output: bool) -> FactorModel:
        return FactorModel(
            tuple(a.copy() for a in self.factors),
            self.output.copy() if with_output else None,
        )

    def gathered(self, n):
        """Factor row of every cell in mode ``n``; ``p_n^T A_n`` where it is missing."""
        a = self.factors[n]
        col = self.coords[:, n]
        if self.pmfs is not None and self.missing_any[n]:
            return np.where(col[:, None] >= 0, a[np.maximum(col, 0)], self.pmfs[n] @ a)
        return a[col]

    def embeddings(self, skip=None):
        """Hadamard product over modes (except ``skip``) of each cell's factor row."""
        out = np.ones((self.coords.shape[0], self.factors[0].shape[1]))
        for n in range(self.n_modes):
            if n != skip:
                out *= self.gathered(n)
        return out

    # -- objective ---------------------------------------------------------

    def objective(self, products=None) -> float:
        if products is None:
            products = self.embeddings()
        pred = products @ self.output.T
        fit = self.scale * float(np.sum(self.w[:, None] * (self.y - pred) ** 2))
        ridge = sum(float(np.sum(a * a)) for a in self.factors)
        smooth = sum(
            m * float(np.sum((t @ a) ** 2))
            for m, t, a in zip(self.mu, self.penalty, self.factors)
            if m > 0
        )
        if self.learn_output:
            ridge += float(np.sum(self.output**2))
            if self.cfg.mu_output > 0:
                smooth += self.cfg.mu_output * float(
                    np.sum((self.penalty_out @ self.output) ** 2)
                )
        return fit + self.cfg.rho * ridge + smooth

    # -- row subproblems ---------------------------------------------------

    def mode_system(self, k, h=None):
        """Per-row Gram matrices / right-hand sides for mode ``k`` (0-based).

        ``h`` holds each cell's Khatri-Rao row over the other modes. Returns
        ``(grams, rhs, missing_gram, missing_rhs)``; the missing terms are
        ``None`` when every cell observes mode ``k``.
        """
        order, bounds, missing = self.groups[k]
        if h is None:
            h = self.embeddings(skip=k)
        vtv = self.output.T @ self.output
        yv = self.y @ self.output
        size, rank = self.shape[k], h.shape[1]
        hw = h * (self.scale * self.w)[:, None]
        grams = np.zeros((size, rank, rank))
        rhs = np.zeros((size, rank))
        filled = np.flatnonzero(bounds[1:] > bounds[:-1])
        if filled.size:
            hs = h[order]
            hws = hw[order]
            starts = bounds[filled]
            rhs[filled] = np.add.reduceat(hws * yv[order], starts, axis=0)
            if rank <= _OUTER_RANK_LIMIT:
                grams[filled] = np.add.reduceat(hws[:, :, None] * hs[:, None, :], starts, axis=0)
            else:
                for i in filled:
                    lo, hi = bounds[i], bounds[i + 1]
                    grams[i] = hws[lo:hi].T @ hs[lo:hi]
            grams[filled] *= vtv
        if missing.size == 0:
            return grams, rhs, None, None
        r_gram = (hw[missing].T @ h[missing]) * vtv
        r_rhs = np.sum(hw[missing] * yv[missing], axis=0)
        return grams, rhs, r_gram, r_rhs

    def row_system(self, k, i, grams, rhs, r_gram, r_rhs, a, marg_vec):
        """Normal equations of row ``i`` of mode ``k`` given the current factor ``a``."""
        mu, dg = self.mu[k], self.gram_penalty[k]
        lhs = grams[i] + (self.cfg.rho + mu * dg[i, i]) * self.eye
        b = rhs[i].copy()
        if mu > 0:
            coupling = dg[i].copy()
            coupling[i] = 0.0
            b -= mu * (coupling @ a)
        if r_gram is not None:
            p = self.pmfs[k][i]
            lhs += p * p * r_gram
            b += p * (r_rhs - r_gram @ (marg_vec - p * a[i]))
        return lhs, b

    def solve(self, lhs, b, regularized):
        if regularized:
            _, x, info = _posv(lhs, b)
            if info == 0:
                return x
        # unregularized block: min-norm solution of the (possibly singular) system
        vals, vecs = np.linalg.eigh(lhs)
        cutoff = max(vals.max(initial=0.0), 0.0) * lhs.shape[0] * np.finfo(float).eps
        keep = vals > cutoff
        if not keep.all():
            self.fallbacks += 1
        return vecs[:, keep] @ ((vecs[:, keep].T @ b) / vals[keep])

    def update_mode(self, k, h=None):
        grams, rhs, r_gram, r_rhs = self.mode_system(k, h)
        a = self.factors[k]
        size, rank = a.shape
        mu = self.mu[k]
        if mu == 0 and r_gram is None and self.cfg.rho > 0:
            lhs = grams + self.cfg.rho * self.eye
            a[:] = np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
            return
        marg_vec = self.pmfs[k] @ a if r_gram is not None else None
        dg = self.gram_penalty[k]
        for i in range(size):
            lhs, b = self.row_system(k, i, grams, rhs, r_gram, r_rhs, a, marg_vec)
            new = self.solve(lhs, b, self.cfg.rho + mu * dg[i, i] > 0)
            if marg_vec is not None:
                marg_vec += self.pmfs[k][i] * (new - a[i])
            a[i] = new

    def output_system(self, g=None):
        if g is None:
            g = self.embeddings()
        gw = g * self.w[:, None]
        gram = self.scale * (gw.T @ g)
        rhs = self.scale * (gw.T @ self.y).T  # (K, F)
        return gram, rhs

    def update_output(self, g=None):
        gram, rhs = self.output_system(g)
        v = self.output
        k_out, rank = v.shape
        mu = self.cfg.mu_output
        dg = self.gram_penalty_out
        if mu == 0 and self.cfg.rho > 0:
            v[:] = np.linalg.solve(gram + self.cfg.rho * self.eye, rhs.T).T
            return
        for j in range(k_out):
            lhs = gram + (self.cfg.rho + mu * dg[j, j]) * self.eye
            b = rhs[j].copy()
            if mu > 0:
                coupling = dg[j].copy()
                coupling[j] = 0.0
                b -= mu * (coupling @ v)
            v[j] = self.solve(lhs, b, self.cfg.rho + mu * dg[j, j] > 0)

    def sweep(self):
        """Update every mode, then the output factor; returns the cells' products."""
        if self.cfg.engine == "compiled":
            return self._compiled_sweep()
        rows = [self.gathered(n) for n in range(self.n_modes)]
        suffix = [None] * self.n_modes
        acc = np.ones_like(rows[0])
        for n in range(self.n_modes - 1, -1, -1):
            suffix[n] = acc
            acc = acc * rows[n]
        left = np.ones_like(rows[0])
        for k in range(self.n_modes):
            self.update_mode(k, left * suffix[k])
            left = left * self.gathered(k)
        if self.learn_output:
            self.update_output(left)
        return left


    def _compiled_sweep(self):
        sizes, rows, order, bounds, ws, dg, pmf = self.layout
        yv = np.ascontiguousarray(self.y @ self.output)
        vtv = self.output.T @ self.output
        self.fallbacks += sweep_modes(
            self.stack, self.offsets, sizes, rows, order, bounds, ws, yv, vtv,
            bool(np.all(self.output == 1.0)), float(self.cfg.rho), self.mu, dg, pmf,
        )
        products = self.embeddings()
        if self.learn_output:
            self.update_output(products)
        return products


def _check(model: FactorModel, data: SparseObservationTensor):
    if tuple(model.shape) != tuple(data.shape):
        raise ValueError(f"model shape {model.shape} does not match data shape {data.shape}")
    k = data.n_outputs
    if model.output_factor is None and k != 1:
        raise ValueError("vector responses need a model with an output factor")
    if model.output_factor is not None and model.output_factor.shape[0] != k:
        raise ValueError("output factor rows do not match the response length")


def _problem(model, data, cfg, schema=None, marginals=None) -> _Problem:
    _check(model, data)
    learn = model.output_factor is not None and data.n_outputs > 1
    prob = _Problem(data, cfg, _schema_mask(schema, len(data.shape)), marginals, learn)
    prob.load(model)
    if model.output_factor is not None and not learn:
        prob.output = np.array(model.output_factor)
    return prob


def objective(model: FactorModel, data: SparseObservationTensor, cfg: SolverConfig,
              schema=None, marginals=None) -> float:
    """Regularized weighted loss of ``model`` on the aggregated data.

    The output factor of a ``K = 1`` model is treated as pinned and carries no
    penalty.
    """
    return _problem(model, data, cfg, schema, marginals).objective()


def row_update(k: int, i: int, data: SparseObservationTensor, model: FactorModel,
               cfg: SolverConfig, schema=None, marginals=None) -> np.ndarray:
    """Exact minimizer over row ``i`` of mode ``k`` (both 1-based), all else fixed.

    ``k = N + 1`` addresses the output factor of a multi-output model.
    """
    prob = _problem(model, data, cfg, schema, marginals)
    n = prob.n_modes
    if k == n + 1 and prob.learn_output:
        if not 1 <= i <= prob.output.shape[0]:
            raise IndexError(f"row {i} out of range for the output mode")
        gram, rhs = prob.output_system()
        mu, dg = cfg.mu_output, prob.gram_penalty_out
        j = i - 1
        lhs = gram + (cfg.rho + mu * dg[j, j]) * np.eye(model.rank)
        b = rhs[j].copy()
        if mu > 0:
            coupling = dg[j].copy()
            coupling[j] = 0.0
            b -= mu * (coupling @ prob.output)
        return prob.solve(lhs, b, cfg.rho + mu * dg[j, j] > 0)
    if not 1 <= k <= n:
        raise IndexError(f"mode {k} out of range 1..{n}")
    if not 1 <= i <= prob.shape[k - 1]:
        raise IndexError(f"row {i} out of range 1..{prob.shape[k - 1]} in mode {k}")
    grams, rhs, r_gram, r_rhs = prob.mode_system(k - 1)
    a = prob.factors[k - 1]
    marg_vec = prob.pmfs[k - 1] @ a if r_gram is not None else None
    lhs, b = prob.row_system(k - 1, i - 1, grams, rhs, r_gram, r_rhs, a, marg_vec)
    mu = prob.mu[k - 1]
    return prob.solve(lhs, b, cfg.rho + mu * prob.gram_penalty[k - 1][i - 1, i - 1] > 0)


def sweep(model: FactorModel, data: SparseObservationTensor, cfg: SolverConfig,
          schema=None, marginals=None) -> FactorModel:
    """One Gauss-Seidel pass: modes in order, rows ascending, then the output factor."""
    prob = _problem(model, data, cfg, schema, marginals)
    prob.sweep()
    return FactorModel(
        tuple(prob.factors),
        prob.output if model.output_factor is not None else None,
    )


def _response_scale(data: SparseObservationTensor) -> float:
    w = data.weights.astype(float)
    mean = np.sum(w[:, None] * data.values, axis=0) / w.sum()
    var = np.sum(w[:, None] * (data.values - mean) ** 2) / (w.sum() * data.n_outputs)
    std = math.sqrt(var)
    if std > 0:
        return std
    return max(float(np.max(np.abs(mean))), 1.0)


def initial_model(shape, cfg: SolverConfig, rng, response_scale: float,
                  n_outputs: Optional[int] = None) -> FactorModel:
    """Uniform ``[-s, s]`` factors with ``s = init_scale (scale / F)^(1 / n_modes)``."""
    learn = n_outputs is not None and n_outputs > 1
    n_modes = len(shape) + (1 if learn else 0)
    s = cfg.init_scale * (response_scale / cfg.rank) ** (1.0 / n_modes)
    factors = tuple(rng.uniform(-s, s, size=(size, cfg.rank)) for size in shape)
    if n_outputs is None:
        return FactorModel(factors)
    if learn:
        return FactorModel(factors, rng.uniform(-s, s, size=(n_outputs, cfg.rank)))
    return FactorModel(factors, np.ones((1, cfg.rank)))


def _run(prob: _Problem, cfg: SolverConfig):
    trace = [prob.objective()]
    converged = False
    for _ in range(cfg.max_sweeps):
        products = prob.sweep()
        trace.append(prob.objective(products))
        if not math.isfinite(trace[-1]):
            break
        prev, cur = trace[-2], trace[-1]
        if abs(prev - cur) <= cfg.rel_tol * max(abs(prev), np.finfo(float).tiny):
            converged = True
            break
    return trace, converged


def _fit(data, schema, cfg, marginals, n_outputs):
    if data.nnz == 0:
        raise ValueError("cannot fit an empty tensor")
    mask = _schema_mask(schema, len(data.shape))
    learn = n_outputs is not None and n_outputs > 1
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    if not np.all(np.isfinite(data.values)):
        raise FitError("non-finite response values")
    with np.errstate(over="ignore"):
        scale = _response_scale(data)
    if not math.isfinite(scale):
        raise FitError("response magnitudes overflow double precision")
    best = None
    finals = []
    for r, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        init = initial_model(data.shape, cfg, rng, scale, n_outputs)
        prob = _Problem(data, cfg, mask, marginals, learn)
        prob.load(init)
        trace, converged = _run(prob, cfg)
        finals.append(trace[-1])
        logger.debug("restart %d: objective %.6g after %d sweeps", r, trace[-1], len(trace) - 1)
        if not math.isfinite(trace[-1]):
            continue
        if best is None or trace[-1] < best[1][-1]:
            best = (prob.model(n_outputs is not None), trace, r, converged, prob.fallbacks)
    if best is None:
        raise FitError("all restarts diverged to non-finite values")
    model, trace, r, converged, fallbacks = best
    report = FitReport(trace, len(trace) - 1, r, finals, converged, fallbacks)
    return model, report


def fit(data: SparseObservationTensor, schema=None, cfg: SolverConfig = SolverConfig(),
        marginals: Optional[MarginalSet] = None):
    """Fit a single-output model; returns ``(FactorModel, FitReport)``.

    ``schema`` (a :class:`~csid.data.FeatureSchema` or boolean mask) zeroes
    the smoothness weight of categorical modes. ``marginals`` are only used
    for cells with missing predictors; they default to the empirical ones.
    """
    if data.n_outputs != 1:
        raise ValueError("fit expects scalar responses; use fit_multi_output")
    return _fit(data, schema, cfg, marginals, None)


def fit_multi_output(data: SparseObservationTensor, schema=None,
                     cfg: SolverConfig = SolverConfig(),
                     marginals: Optional[MarginalSet] = None):
    """Fit the stacked ``(N+1)``-way model; the result carries ``output_factor``.

    With ``K = 1`` the output factor is pinned to ones and the run is identical
    to :func:`fit`.
    """
    return _fit(data, schema, cfg, marginals, data.n_outputs)
