"""Acceptance runs, one test per criterion.

Each test prints a PASS/FAIL line (also collected into the terminal summary)
before asserting at the stated tolerance.

Criteria 8 and 9 need the UCI Energy Efficiency table as CSV with columns
X1..X8, Y1, Y2. Point ``CSID_ENERGY_DATA`` at it, or place it at
``data/ENB2012_data.csv`` in the repository root.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from csid import io
from csid.data import aggregate_arrays, fit_marginals, lloyd_max_fit
from csid.oracle import brute_conditional_expectation, materialize, synth
from csid.prediction import predict_batch, predict_partial, rmse
from csid.selection import DEFAULT_GRID, monte_carlo
from csid.solver import SolverConfig, fit, fit_multi_output, objective
from csid.tensor_model import FactorModel
from helpers import random_problem, row_gradient_check, two_level_optimum


def test_criterion_1_exact_recovery():
    start = time.perf_counter()
    planted, coords, y = synth((10, 10, 10), rank=3, seed=1)
    tensor = aggregate_arrays(coords, y, planted.shape)
    cfg = SolverConfig(rank=3, rho=1e-6, mu=1e-6, max_sweeps=200, restarts=5, seed=0,
                       rel_tol=1e-12)
    model, report = fit(tensor, None, cfg)
    elapsed = time.perf_counter() - start
    truth = materialize(planted)
    err = np.linalg.norm(materialize(model) - truth) / np.linalg.norm(truth)
    ok = err <= 1e-3 and elapsed <= 30 and report.sweeps <= 200
    record(1, ok, f"relative error {err:.2e} (<= 1e-3), {report.sweeps} sweeps, "
                  f"{elapsed:.1f} s (<= 30 s)")
    assert ok


def test_criterion_2_sign_benchmarks():
    _, coords, y = synth(10, kind="sign_product")
    perm = np.random.default_rng(0).permutation(len(y))
    n_train = int(round(0.3 * len(y)))
    train, test = perm[:n_train], perm[n_train:]
    tensor = aggregate_arrays(coords[train], y[train], (2,) * 10)
    model, _ = fit(tensor, None, SolverConfig(rank=1, rho=1e-6, mu=0.0, restarts=5, seed=0))
    product = rmse(predict_batch(model, coords[test]), y[test])

    _, coords, y = synth(6, kind="sign_sum")
    tensor = aggregate_arrays(coords, y, (2,) * 6)
    cfg = SolverConfig(rank=6, rho=0.0, mu=0.0, restarts=5, seed=0, max_sweeps=2000,
                       rel_tol=1e-12)
    model, _ = fit(tensor, None, cfg)
    total = rmse(predict_batch(model, coords), y)

    ok = product <= 0.05 and total <= 1e-3
    record(2, ok, f"sign-product held-out rmse {product:.2e} (<= 0.05), "
                  f"sign-sum rmse {total:.2e} (<= 1e-3)")
    assert ok


def test_criterion_3_monotone_objective():
    rng = np.random.default_rng(2024)
    worst, violations = -np.inf, 0
    for trial in range(100):
        p = random_problem(rng, max_modes=4, max_size=8, max_rank=4,
                           outputs=3 if trial % 4 == 0 else None,
                           missing=0.2 if trial % 3 == 0 else 0.0)
        cfg = replace(p.cfg, max_sweeps=30, rel_tol=0.0)
        run = fit_multi_output if p.tensor.n_outputs > 1 else fit
        _, report = run(p.tensor, p.mask, cfg, p.marginals)
        trace = np.array(report.objective_trace)
        slack = np.diff(trace) / np.abs(trace[:-1])
        worst = max(worst, slack.max())
        violations += int(np.any(slack > 1e-9))
    ok = violations == 0
    record(3, ok, f"{violations} of 100 traces rise; largest relative step {worst:.1e} "
                  f"(slack 1e-9)")
    assert ok


def test_criterion_4_row_optimality():
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(100):
        p = random_problem(rng, outputs=3 if trial % 5 == 0 else None,
                           missing=0.2 if trial % 4 == 0 else 0.0)
        n_blocks = p.model.ndim + (1 if p.model.output_factor is not None else 0)
        k = int(rng.integers(1, n_blocks + 1))
        size = p.model.shape[k - 1] if k <= p.model.ndim else p.model.output_factor.shape[0]
        i = int(rng.integers(1, size + 1))
        at_update, at_random = row_gradient_check(p, k, i)
        worst = max(worst, at_update / (1e-6 * (1 + at_random)))
    ok = worst <= 1
    record(4, ok, f"max gradient norm / (1e-6 (1 + random-point norm)) = {worst:.2e} (<= 1)")
    assert ok


def test_criterion_5_aggregation_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(100):
        p = random_problem(rng, max_size=4, n_samples=int(rng.integers(5, 80)),
                           outputs=2 if trial % 4 == 0 else None)
        per_sample = p.brute(p.model)
        aggregated = objective(p.model, p.tensor, p.cfg, p.mask)
        rhs = aggregated + p.tensor.residual_ss / p.tensor.n_samples
        worst = max(worst, abs(per_sample - rhs) / abs(per_sample))
    ok = worst <= 1e-10
    record(5, ok, f"max relative gap {worst:.2e} (<= 1e-10) over 100 datasets")
    assert ok


def _weighted_magnitude(model, pidx, pmfs):
    """Sum of Pr(cell) |X(cell)| over the cells the expectation ranges over."""
    dense = np.abs(materialize(model))
    for axis in reversed(range(model.ndim)):
        i = pidx[axis]
        dense = np.tensordot(dense, pmfs[axis], axes=([axis], [0])) if i is None \
            else np.take(dense, i - 1, axis=axis)
    return float(dense)


def test_criterion_6_missing_expectation():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        shape = tuple(int(s) for s in rng.integers(1, 6, n))
        rank = int(rng.integers(1, 4))
        model = FactorModel(tuple(rng.standard_normal((s, rank)) for s in shape))
        coords = np.column_stack([rng.integers(1, s + 1, 30) for s in shape])
        marginals = fit_marginals(coords, shape, smoothing=float(rng.choice([0.0, 0.5])))
        pidx = tuple(None if rng.random() < 0.5 else int(rng.integers(1, s + 1))
                     for s in shape)
        got = predict_partial(model, pidx, marginals)
        expect = float(brute_conditional_expectation(model, pidx, marginals)[0])
        scale = max(abs(got), abs(expect), _weighted_magnitude(model, pidx, marginals.pmfs))
        worst = max(worst, abs(got - expect) / scale)
    ok = worst <= 1e-12
    record(6, ok, f"max relative deviation {worst:.2e} (<= 1e-12) over 1000 cases")
    assert ok


def test_criterion_7_lloyd_max():
    rng = np.random.default_rng(7)
    rises, worst, samples = 0, 0.0, 0
    while samples < 2000:
        m = int(rng.integers(2, 65))
        kind = samples % 3
        if kind == 0:
            v = rng.standard_normal(m)
        elif kind == 1:
            v = rng.standard_exponential(m) ** 2
        else:
            v = rng.integers(0, 6, m).astype(float)
        if np.unique(v).size < 2:
            continue
        q = lloyd_max_fit(v, 2)
        rises += int(np.any(np.diff(q.distortion_trace) > 0))
        worst = max(worst, abs(q.distortion - two_level_optimum(v)))
        samples += 1
    ok = rises == 0 and worst <= 1e-9
    record(7, ok, f"{rises} rising traces; max gap to exhaustive 2-level search "
                  f"{worst:.1e} (<= 1e-9) over {samples} samples")
    assert ok


# --------------------------------------------------------------------------
# Energy Efficiency runs

ENERGY_SCHEMA = """
X1 = continuous
X2 = continuous
X3 = continuous
X4 = continuous
X5 = continuous
X6 = categorical
X7 = continuous
X8 = categorical
Y1 = response
Y2 = ignore
"""
ENERGY_BASELINE = 0.39
# CV fits are capped to keep ten repeats of the 100-cell grid inside the time budget
ENERGY_CV = SolverConfig(max_sweeps=50, rel_tol=1e-3)
_energy_cache = {}


def _energy_path():
    env = os.environ.get("CSID_ENERGY_DATA")
    return Path(env) if env else Path(__file__).resolve().parents[1] / "data" / "ENB2012_data.csv"


def _energy_runs(mask_fraction):
    if mask_fraction not in _energy_cache:
        path = _energy_path()
        if not path.is_file():
            return None
        data = io.read_table(path, io.parse_schema(ENERGY_SCHEMA))
        start = time.perf_counter()
        runs = monte_carlo(data, DEFAULT_GRID, SolverConfig(), repeats=10, train_fraction=0.8,
                           folds=5, seed=0, alphabet=25,
                           missing="expect" if mask_fraction else "drop",
                           cv_cfg=ENERGY_CV, n_jobs=os.cpu_count() or 1,
                           mask_fraction=mask_fraction)
        scores = np.array([r.test_rmse for r in runs])
        _energy_cache[mask_fraction] = (scores, time.perf_counter() - start)
    return _energy_cache[mask_fraction]


@pytest.mark.slow
def test_criterion_8_energy_efficiency():
    result = _energy_runs(0.0)
    if result is None:
        record(8, False, f"Energy Efficiency data not found at {_energy_path()}")
        pytest.fail("Energy Efficiency CSV unavailable; set CSID_ENERGY_DATA")
    scores, elapsed = result
    ok = scores.mean() <= 1.0 and elapsed <= 600
    record(8, ok, f"mean test rmse {scores.mean():.3f} +- {scores.std():.3f} (<= 1.0; "
                  f"published {ENERGY_BASELINE}), {elapsed:.0f} s (<= 600 s)")
    assert ok


@pytest.mark.slow
def test_criterion_9_masked_predictors():
    base, masked = _energy_runs(0.0), _energy_runs(0.3)
    if base is None or masked is None:
        record(9, False, f"Energy Efficiency data not found at {_energy_path()}")
        pytest.fail("Energy Efficiency CSV unavailable; set CSID_ENERGY_DATA")
    ratio = masked[0].mean() / base[0].mean()
    ok = ratio <= 2.0
    record(9, ok, f"mean test rmse {masked[0].mean():.3f} with 30% of cells masked, "
                  f"{ratio:.2f}x the complete-data value (<= 2x)")
    assert ok


def test_criterion_10_multi_output():
    planted, coords, y = synth((5, 4, 3), rank=2, seed=4, n_outputs=3)
    tensor = aggregate_arrays(coords, y, planted.shape)
    cfg = SolverConfig(rank=2, rho=1e-8, max_sweeps=2000, rel_tol=1e-14, restarts=3, seed=0)
    model, _ = fit_multi_output(tensor, None, cfg)
    recon = float(np.sqrt(np.mean((materialize(model) - materialize(planted)) ** 2)))

    _, coords, y = synth((5, 4, 3), rank=2, seed=2, noise_sd=0.05)
    tensor = aggregate_arrays(coords, y[:, None], (5, 4, 3))
    cfg = SolverConfig(rank=3, rho=1e-3, mu=0.1, restarts=2, seed=9)
    _, plain = fit(tensor, None, cfg)
    _, stacked = fit_multi_output(tensor, None, cfg)
    a, b = np.array(plain.objective_trace), np.array(stacked.objective_trace)
    gap = np.inf if a.shape != b.shape else float(np.max(np.abs(a - b) / np.abs(a)))

    ok = recon <= 1e-2 and gap <= 1e-12
    record(10, ok, f"K=3 reconstruction rmse {recon:.2e} (<= 1e-2); K=1 stacked vs plain "
                   f"trace gap {gap:.1e} (<= 1e-12)")
    assert ok
