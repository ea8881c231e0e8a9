"""Random problem generators shared by the unit and acceptance tests."""

from dataclasses import dataclass

import numpy as np

from csid.data import aggregate_arrays, fit_marginals
from csid.oracle import brute_objective, fd_gradient
from csid.solver import SolverConfig, row_update
from csid.tensor_model import FactorModel


@dataclass
class Problem:
    model: FactorModel
    coords: np.ndarray
    y: np.ndarray
    tensor: object
    cfg: SolverConfig
    mask: np.ndarray
    marginals: object

    @property
    def samples(self):
        out = []
        for c, v in zip(self.coords, self.y):
            out.append((tuple(None if i == 0 else int(i) for i in c), v))
        return out

    def brute(self, model):
        return brute_objective(model, self.samples, self.cfg, self.mask, self.marginals)


def random_problem(rng, max_modes=4, max_size=6, max_rank=4, outputs=None, missing=0.0,
                   rho=None, mu=None, difference=None, n_samples=None):
    n = int(rng.integers(2, max_modes + 1))
    shape = tuple(int(s) for s in rng.integers(1, max_size + 1, n))
    rank = int(rng.integers(1, max_rank + 1))
    m = n_samples or int(rng.integers(5, 40))
    coords = np.column_stack([rng.integers(1, s + 1, m) for s in shape])
    if missing > 0:
        coords[rng.random(coords.shape) < missing] = 0
    k = outputs
    y = rng.standard_normal((m, k)) if k else rng.standard_normal(m)
    cfg = SolverConfig(
        rank=rank,
        rho=float(rng.choice([1e-3, 1e-2, 0.1])) if rho is None else rho,
        mu=float(rng.choice([0.0, 0.01, 0.3])) if mu is None else mu,
        difference=difference or str(rng.choice(["first", "second"])),
        mu_output=float(rng.choice([0.0, 0.2])),
        seed=int(rng.integers(2**31)),
    )
    mask = rng.random(n) < 0.7
    factors = tuple(rng.standard_normal((s, rank)) for s in shape)
    v = rng.standard_normal((k, rank)) if k else None
    marginals = fit_marginals(coords, shape, smoothing=0.5) if missing > 0 else None
    tensor = aggregate_arrays(coords, y, shape)
    return Problem(FactorModel(factors, v), coords, y, tensor, cfg, mask, marginals)


def with_row(model, k, i, row):
    """Copy of ``model`` with row ``i`` of mode ``k`` (1-based, N+1 = output) replaced."""
    if k == model.ndim + 1:
        v = np.array(model.output_factor)
        v[i - 1] = row
        return FactorModel(model.factors, v)
    a = np.array(model.factors[k - 1])
    a[i - 1] = row
    return model.replace(k, a)


def row_gradient_check(prob, k, i, update=None):
    """Finite-difference gradient norms at the returned row and at a random row."""
    if update is None:
        update = row_update(k, i, prob.tensor, prob.model, prob.cfg, prob.mask, prob.marginals)

    def f(row):
        return prob.brute(with_row(prob.model, k, i, row))

    at_update = np.linalg.norm(fd_gradient(f, update))
    rand = np.random.default_rng(k * 1000 + i).standard_normal(update.shape)
    at_random = np.linalg.norm(fd_gradient(f, rand))
    return at_update, at_random


def two_level_optimum(values):
    """Exhaustive search over every threshold between sorted distinct values."""
    v = np.sort(np.asarray(values, dtype=float))
    best = np.inf
    for j in range(1, v.size):
        if v[j] == v[j - 1]:
            continue
        lo, hi = v[:j], v[j:]
        sse = np.sum((lo - lo.mean()) ** 2) + np.sum((hi - hi.mean()) ** 2)
        best = min(best, sse / v.size)
    return best
