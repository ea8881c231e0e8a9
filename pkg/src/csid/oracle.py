"""Brute-force reference computations for tests.

Nothing here is optimized: every function loops over cells or samples so it
can be read against the defining formulas. Size guards raise instead of
truncating.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor_model import FactorModel

MAX_CELLS = 10**6


class OracleSizeError(ValueError):
    pass


def _cells(shape):
    total = int(np.prod(shape, dtype=np.int64))
    if total > MAX_CELLS:
        raise OracleSizeError(f"{total} cells exceed the oracle limit of {MAX_CELLS}")
    return itertools.product(*(range(1, s + 1) for s in shape))


def cell_value(model: FactorModel, idx) -> np.ndarray:
    """sum_f prod_n A_n(i_n, f), times V(j, f) for each output j."""
    outputs = [None] if model.output_factor is None else range(model.output_factor.shape[0])
    values = []
    for j in outputs:
        total = 0.0
        for f in range(model.rank):
            term = 1.0
            for n, i in enumerate(idx):
                term *= model.factors[n][i - 1, f]
            if j is not None:
                term *= model.output_factor[j, f]
            total += term
        values.append(total)
    return np.array(values)


def materialize(model: FactorModel) -> np.ndarray:
    """Dense tensor of every cell; multi-output models get a trailing K axis."""
    shape = model.shape
    k = 1 if model.output_factor is None else model.output_factor.shape[0]
    out = np.zeros(shape + (k,))
    for idx in _cells(shape):
        out[tuple(i - 1 for i in idx)] = cell_value(model, idx)
    return out[..., 0] if model.output_factor is None else out


def brute_conditional_expectation(model: FactorModel, pidx, marginals) -> np.ndarray:
    """sum over missing-value tuples of prod_n p_n(x_n) * f(x_obs, x_miss)."""
    missing = [n for n, i in enumerate(pidx) if i is None]
    sizes = [model.shape[n] for n in missing]
    if int(np.prod(sizes, dtype=np.int64)) > MAX_CELLS:
        raise OracleSizeError("too many missing-value combinations")
    total = 0.0
    for combo in itertools.product(*(range(1, s + 1) for s in sizes)):
        idx = list(pidx)
        prob = 1.0
        for n, v in zip(missing, combo):
            idx[n] = v
            prob *= marginals[n][v - 1]
        total = total + prob * cell_value(model, idx)
    return np.asarray(total)


def difference_operator(kind: str, size: int) -> np.ndarray:
    if kind == "first":
        t = np.zeros((max(size - 1, 0), size))
        for i in range(size - 1):
            t[i, i] = 1.0
            t[i, i + 1] = -1.0
    else:
        t = np.zeros((max(size - 2, 0), size))
        for i in range(size - 2):
            t[i, i] = -1.0
            t[i, i + 1] = 2.0
            t[i, i + 2] = -1.0
    return t


def brute_objective(model: FactorModel, samples, cfg, smooth_mask=None, marginals=None) -> float:
    """Per-sample loss plus penalties.

    ``samples`` is a list of ``(index, response)`` with ``None`` for missing
    index components. A ``K = 1`` output factor is pinned and not penalized.
    """
    total = 0.0
    for idx, y in samples:
        if any(i is None for i in idx):
            pred = brute_conditional_expectation(model, idx, marginals)
        else:
            pred = cell_value(model, idx)
        total += float(np.sum((np.atleast_1d(y) - pred) ** 2))
    fit = total / len(samples) if cfg.normalize else total

    n = model.ndim
    mu = np.broadcast_to(np.asarray(cfg.mu, dtype=float), (n,)).copy()
    if smooth_mask is not None:
        mu[~np.asarray(smooth_mask)] = 0.0
    penalty = 0.0
    for m, a in zip(mu, model.factors):
        penalty += cfg.rho * float(np.sum(a**2))
        penalty += m * float(np.sum((difference_operator(cfg.difference, a.shape[0]) @ a) ** 2))
    v = model.output_factor
    if v is not None and v.shape[0] > 1:
        penalty += cfg.rho * float(np.sum(v**2))
        penalty += cfg.mu_output * float(
            np.sum((difference_operator(cfg.difference, v.shape[0]) @ v) ** 2)
        )
    return fit + penalty


def fd_gradient(fun, point, h: float = 1e-5) -> np.ndarray:
    """Central differences with step ``h * max(1, |x_i|)``."""
    x = np.array(point, dtype=float)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        step = h * max(1.0, abs(x[i]))
        orig = x[i]
        x[i] = orig + step
        up = fun(x)
        x[i] = orig - step
        down = fun(x)
        x[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


# --------------------------------------------------------------------------
# Planted models


def sign_product_model(n_modes: int) -> FactorModel:
    """Rank-1 model of prod_n sign(x_n) on the grid {-1, +1} (index 1 is -1)."""
    return FactorModel(tuple(np.array([[-1.0], [1.0]]) for _ in range(n_modes)))


def sign_sum_model(n_modes: int) -> FactorModel:
    """Rank-N model of sum_n sign(x_n): column f varies only in mode f."""
    factors = []
    for n in range(n_modes):
        a = np.ones((2, n_modes))
        a[:, n] = [-1.0, 1.0]
        factors.append(a)
    return FactorModel(tuple(factors))


def synth(shape, rank=None, seed=None, noise_sd: float = 0.0, n_samples=None,
          kind: str = "random", n_outputs=None):
    """Planted model plus samples drawn from it.

    ``kind`` is ``"random"`` (Gaussian factors of the given rank),
    ``"sign_product"`` or ``"sign_sum"`` (binary grid, ``shape`` is then the
    number of modes). Without ``n_samples`` every cell is observed once;
    otherwise cells are drawn uniformly with replacement.

    Returns ``(model, coords, responses)`` with 1-based ``coords``.
    """
    rng = np.random.default_rng(seed)
    if kind == "sign_product":
        model = sign_product_model(int(shape))
    elif kind == "sign_sum":
        model = sign_sum_model(int(shape))
    elif kind == "random":
        factors = tuple(rng.standard_normal((s, rank)) for s in shape)
        v = None if n_outputs is None else rng.standard_normal((n_outputs, rank))
        model = FactorModel(factors, v)
    else:
        raise ValueError(f"unknown planted model {kind!r}")

    dims = model.shape
    if n_samples is None:
        coords = np.array(list(_cells(dims)), dtype=np.int64)
    else:
        coords = np.column_stack([rng.integers(1, s + 1, size=n_samples) for s in dims])
    y = np.array([cell_value(model, c) for c in coords])
    if model.output_factor is None:
        y = y[:, 0]
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(y.shape)
    return model, coords, y
