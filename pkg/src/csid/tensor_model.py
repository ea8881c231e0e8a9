"""CPD factor model and its pure evaluations.

Cell indices are 1-based tuples throughout the public API (``(1, 1, 1)`` is the
first cell). Internally factor rows are addressed 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

CellIndex = Sequence[int]


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    if out.ndim != 2:
        raise ValueError(f"factor matrices must be 2-D, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FactorModel:
    """Rank-``F`` CPD ``[[A_1, ..., A_N]]`` with an optional output factor ``V``.

    ``factors[n]`` has shape ``(I_n, F)``. ``output_factor`` (shape ``(K, F)``)
    stacks ``K`` response tensors along an extra mode. Arrays are copied and
    made read-only on construction.
    """

    factors: tuple
    output_factor: Optional[np.ndarray] = None

    def __post_init__(self):
        factors = tuple(_frozen(a) for a in self.factors)
        if not factors:
            raise ValueError("a factor model needs at least one mode")
        rank = factors[0].shape[1]
        if rank < 1:
            raise ValueError("rank must be positive")
        for n, a in enumerate(factors):
            if a.shape[1] != rank:
                raise ValueError(
                    f"factor {n + 1} has {a.shape[1]} columns, expected {rank}"
                )
            if not np.all(np.isfinite(a)):
                raise ValueError(f"factor {n + 1} has non-finite entries")
        object.__setattr__(self, "factors", factors)
        if self.output_factor is not None:
            v = _frozen(self.output_factor)
            if v.shape[1] != rank:
                raise ValueError(
                    f"output factor has {v.shape[1]} columns, expected {rank}"
                )
            if not np.all(np.isfinite(v)):
                raise ValueError("output factor has non-finite entries")
            object.__setattr__(self, "output_factor", v)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple:
        return tuple(a.shape[0] for a in self.factors)

    @property
    def n_outputs(self) -> Optional[int]:
        return None if self.output_factor is None else self.output_factor.shape[0]

    def replace(self, mode: int, factor) -> "FactorModel":
        """Return a copy with the factor of ``mode`` (1-based) swapped out."""
        factors = list(self.factors)
        factors[mode - 1] = factor
        return FactorModel(tuple(factors), self.output_factor)


def check_index(model: FactorModel, idx: CellIndex, skip_mode: Optional[int] = None):
    """Validate a 1-based cell index and return its 0-based rows."""
    if len(idx) != model.ndim:
        raise IndexError(
            f"index has {len(idx)} components, model has {model.ndim} modes"
        )
    rows = []
    for n, (i, size) in enumerate(zip(idx, model.shape), start=1):
        if n == skip_mode:
            rows.append(None)
            continue
        if int(i) != i or not 1 <= i <= size:
            raise IndexError(f"index {i} out of range 1..{size} in mode {n}")
        rows.append(int(i) - 1)
    return rows


def khatri_rao_row(model: FactorModel, idx: CellIndex, skip_mode: int) -> np.ndarray:
    """Row of the Khatri-Rao product of all factors except ``skip_mode``.

    This is the Hadamard product of ``A_n(i_n, :)`` over ``n != skip_mode``; the
    ``skip_mode`` component of ``idx`` is ignored.
    """
    if not 1 <= skip_mode <= model.ndim:
        raise IndexError(f"skip_mode {skip_mode} out of range 1..{model.ndim}")
    rows = check_index(model, idx, skip_mode=skip_mode)
    out = np.ones(model.rank)
    for n, r in enumerate(rows):
        if r is not None:
            out = out * model.factors[n][r]
    return out


def eval_cell(model: FactorModel, idx: CellIndex) -> float:
    """``X(i_1, ..., i_N) = sum_f prod_n A_n(i_n, f)``."""
    rows = check_index(model, idx)
    prod = np.ones(model.rank)
    for a, r in zip(model.factors, rows):
        prod = prod * a[r]
    return float(prod.sum())


def mode_vector_product(model: FactorModel, mode: int, u) -> FactorModel:
    """Contract the model with vector ``u`` along ``mode`` (1-based).

    On a CPD this only rewrites one factor: ``A_mode`` becomes the single row
    ``u^T A_mode``, so the result has dimension 1 in that mode.
    """
    if not 1 <= mode <= model.ndim:
        raise IndexError(f"mode {mode} out of range 1..{model.ndim}")
    u = np.asarray(u, dtype=float)
    a = model.factors[mode - 1]
    if u.shape != (a.shape[0],):
        raise ValueError(
            f"vector of length {u.shape} does not match mode {mode} size {a.shape[0]}"
        )
    return model.replace(mode, (u @ a)[None, :])


def row_products(model: FactorModel, coords: np.ndarray, marginals=None) -> np.ndarray:
    """Hadamard products of factor rows for a batch of cells.

    ``coords`` is an integer array of shape ``(n_cells, N)`` holding 1-based
    indices, with 0 marking a missing component. Missing components contribute
    ``p_n^T A_n`` and therefore require ``marginals``.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != model.ndim:
        raise ValueError(f"coords must have shape (n, {model.ndim})")
    out = np.ones((coords.shape[0], model.rank))
    for n, a in enumerate(model.factors):
        col = coords[:, n]
        if np.any(col < 0) or np.any(col > a.shape[0]):
            bad = col[(col < 0) | (col > a.shape[0])][0]
            raise IndexError(f"index {bad} out of range 1..{a.shape[0]} in mode {n + 1}")
        missing = col == 0
        if missing.any():
            if marginals is None:
                raise ValueError(f"mode {n + 1} has missing entries but no marginals")
            out[missing] *= np.asarray(marginals[n], dtype=float) @ a
        observed = ~missing
        out[observed] *= a[col[observed] - 1]
    return out
