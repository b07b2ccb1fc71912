from fractions import Fraction

import numpy as np
import pytest

from twophase import (
    CalibrationError,
    CalibrationProblem,
    CollinearAuxiliariesError,
    PopulationFrame,
    attach_design,
    solve_calibration,
    stabilised_rake,
)


def small_problem(seed=0, n=12, k=2, distance="raking", q=None, sampled=6,
                  constant_column=False):
    rng = np.random.default_rng(seed)
    aux = rng.standard_normal((n, k))
    if constant_column:
        aux[:, 0] = 1.0
    included = np.zeros(n, dtype=bool)
    included[rng.choice(n, size=sampled, replace=False)] = True
    base = np.full(n, np.nan)
    base[included] = n / sampled
    return CalibrationProblem(aux=aux, included=included, base_weights=base,
                              stabilisers=q, distance=distance)


def grid_oracle_alpha(problem, rounds=6, width=2.0, grid=41):
    """Zooming lattice search for the exponential-distance multipliers."""
    G = problem.aux[problem.included]
    b = problem.base_weights[problem.included] * problem.stabilisers[problem.included]
    target = problem.target

    def gap(alpha):
        return np.max(np.abs((b * np.exp(G @ alpha)) @ G - target))

    center = np.zeros(G.shape[1])
    for _ in range(rounds):
        axes = [np.linspace(c - width, c + width, grid) for c in center]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.column_stack([m.ravel() for m in mesh])
        gaps = [gap(p) for p in pts]
        center = pts[int(np.argmin(gaps))]
        width = width * 2.5 / grid  # keep next grid around the best cell
    return center, gap(center)


def test_satisfied_constraints_give_unit_factors_both_distances():
    n = 8
    aux = np.column_stack([np.ones(n), np.arange(n, dtype=float)])
    included = np.ones(n, dtype=bool)
    base = np.ones(n)
    for distance in ("raking", "linear"):
        problem = CalibrationProblem(aux=aux, included=included,
                                     base_weights=base, distance=distance)
        res = solve_calibration(problem)
        assert np.allclose(res.g_factors, 1.0, atol=1e-12)
        assert np.allclose(res.multipliers, 0.0, atol=1e-12)
        assert res.constraint_residual < 1e-12


def test_single_constant_auxiliary_is_ratio_adjustment():
    # one constraint, one free scale: g = N / sum(R d)
    n = 10
    included = np.zeros(n, dtype=bool)
    included[:4] = True
    base = np.full(n, np.nan)
    base[:4] = np.array([2.0, 2.0, 3.0, 1.0])
    expected = n / 8.0
    for distance in ("raking", "linear"):
        problem = CalibrationProblem(aux=np.ones((n, 1)), included=included,
                                     base_weights=base, distance=distance)
        res = solve_calibration(problem)
        assert np.allclose(res.g_factors, expected, rtol=1e-12)


def test_exponential_multipliers_match_grid_oracle():
    # 6-unit, 2-auxiliary toy problem against a zooming-lattice search
    rng = np.random.default_rng(5)
    n = 6
    aux = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)])
    included = np.ones(n, dtype=bool)
    base = rng.uniform(0.8, 2.0, n)
    problem = CalibrationProblem(aux=aux, included=included, base_weights=base,
                                 distance="raking")
    # perturb the target so alpha is away from zero but solvable
    problem.target = problem.target * 1.15
    oracle, oracle_gap = grid_oracle_alpha(problem)
    assert oracle_gap < 1e-6 * max(1.0, np.max(np.abs(problem.target)))
    res = solve_calibration(problem)
    assert res.multipliers == pytest.approx(oracle, abs=5e-4)
    assert res.constraint_residual < 1e-8


def test_calibration_residuals_on_randomised_problems():
    # criterion: residual < 1e-8 on 100 randomised small problems, both
    # distances; problems shaped like real use (constant column, design
    # base weights, population target, random stabilisers)
    rng = np.random.default_rng(100)
    failures = 0
    for seed in range(50):
        q = rng.uniform(0.5, 2.0, 12) if seed % 2 else None
        for distance in ("raking", "linear"):
            problem = small_problem(seed=seed, distance=distance, q=q,
                                    sampled=8, constant_column=True)
            res = solve_calibration(problem)
            if res.constraint_residual >= 1e-8:
                failures += 1
    assert failures == 0


def test_stabilised_constraints_with_rational_oracle():
    # non-constant q on 10 units; recompute both sides of the constraint
    # with exact rational accumulation of the solver's g factors
    n = 10
    rng = np.random.default_rng(9)
    aux = np.column_stack([np.ones(n), rng.integers(-3, 4, n).astype(float)])
    included = np.zeros(n, dtype=bool)
    included[[0, 2, 4, 5, 7, 9]] = True
    strata = np.zeros(n, dtype=int)
    frame = PopulationFrame({"y": np.zeros(n)}, {"y": "outcome"})
    design = attach_design(frame, strata, included)
    q = np.array([Fraction(k % 3 + 1, 2) for k in range(n)], dtype=object)
    q_float = np.array([float(v) for v in q])

    ws = stabilised_rake(design, aux, stabilisers=q_float, distance="raking")
    g = ws.raking

    d = [Fraction(n, int(included.sum()))] * n  # single stratum: d = N/n
    for col in range(aux.shape[1]):
        lhs = sum(
            d[i] * Fraction(g[i]) * q[i] * Fraction(aux[i, col])
            for i in range(n) if included[i]
        )
        rhs = sum(q[i] * Fraction(aux[i, col]) for i in range(n))
        assert abs(float(lhs - rhs)) < 1e-8 * max(1.0, abs(float(rhs)))


def test_unit_q_equals_plain_raking_exactly():
    frame = PopulationFrame({"y": np.zeros(12)}, {"y": "outcome"})
    rng = np.random.default_rng(3)
    included = np.zeros(12, dtype=bool)
    included[rng.choice(12, 7, replace=False)] = True
    design = attach_design(frame, np.zeros(12, int), included)
    aux = np.column_stack([np.ones(12), rng.standard_normal(12)])
    plain = stabilised_rake(design, aux)
    forced = stabilised_rake(design, aux, stabilisers=np.ones(12))
    assert np.array_equal(plain.raking, forced.raking)


def test_constant_q_cancels_from_both_sides():
    frame = PopulationFrame({"y": np.zeros(12)}, {"y": "outcome"})
    rng = np.random.default_rng(4)
    included = np.zeros(12, dtype=bool)
    included[rng.choice(12, 7, replace=False)] = True
    design = attach_design(frame, np.zeros(12, int), included)
    aux = np.column_stack([np.ones(12), rng.standard_normal(12)])
    g1 = stabilised_rake(design, aux, stabilisers=np.ones(12)).raking
    g2 = stabilised_rake(design, aux, stabilisers=np.full(12, 2.0)).raking
    g3 = stabilised_rake(design, aux, stabilisers=np.full(12, 3.0)).raking
    assert np.max(np.abs(g1 - g2)) < 1e-13
    assert np.max(np.abs(g1 - g3)) < 1e-12


def test_linear_distance_optimality_against_feasible_perturbations():
    rng = np.random.default_rng(21)
    problem = small_problem(seed=2, distance="linear", sampled=8)
    res = solve_calibration(problem)
    incl = problem.included
    G = problem.aux[incl]
    d = problem.base_weights[incl]
    g = res.g_factors

    def objective(gvec):
        return np.sum((d * gvec - d) ** 2 / (2 * d))

    # feasible directions: null space of (d G)^T
    A = (G * d[:, None]).T
    _, _, vt = np.linalg.svd(A)
    null = vt[A.shape[0]:]
    base_obj = objective(g)
    for _ in range(25):
        direction = null.T @ rng.standard_normal(null.shape[0])
        for t in (1e-3, 1e-2, 0.1):
            assert objective(g + t * direction) >= base_obj - 1e-12


def test_exponential_and_linear_agree_to_first_order():
    # shrink the constraint gap by eps: the g differences shrink ~ eps^2
    base_problem = small_problem(seed=8, distance="raking", sampled=9)
    satisfied = (base_problem.base_weights[base_problem.included]
                 @ base_problem.aux[base_problem.included])
    delta = np.array([1.3, -0.9])
    diffs = []
    for eps in (0.2, 0.1, 0.05):
        problem = small_problem(seed=8, distance="raking", sampled=9)
        problem.target = satisfied + eps * delta
        g_exp = solve_calibration(problem).g_factors
        problem_lin = small_problem(seed=8, distance="linear", sampled=9)
        problem_lin.target = satisfied + eps * delta
        g_lin = solve_calibration(problem_lin).g_factors
        diffs.append(np.max(np.abs(g_exp - g_lin)))
    assert diffs[0] / diffs[1] == pytest.approx(4.0, rel=0.5)
    assert diffs[1] / diffs[2] == pytest.approx(4.0, rel=0.5)


def test_negative_g_flagged_under_linear_distance():
    n = 10
    aux = np.column_stack([np.ones(n), np.arange(n, dtype=float)])
    included = np.ones(n, dtype=bool)
    base = np.ones(n)
    problem = CalibrationProblem(aux=aux, included=included, base_weights=base,
                                 distance="linear")
    # demand a wildly skewed total so some g go negative
    problem.target = np.array([float(n), 9.0 * np.sum(np.arange(n))])
    res = solve_calibration(problem)
    assert res.negative_g
    totals = (base * res.g_factors) @ aux
    assert totals == pytest.approx(problem.target, rel=1e-10)


def test_collinear_auxiliaries_error():
    n = 10
    col = np.arange(n, dtype=float)
    aux = np.column_stack([col, 2.0 * col])
    problem = CalibrationProblem(aux=aux, included=np.ones(n, bool),
                                 base_weights=np.ones(n))
    with pytest.raises(CollinearAuxiliariesError):
        solve_calibration(problem)


def test_infeasible_exponential_target_errors():
    n = 8
    aux = np.abs(np.random.default_rng(2).standard_normal((n, 1))) + 0.5
    problem = CalibrationProblem(aux=aux, included=np.ones(n, bool),
                                 base_weights=np.ones(n))
    problem.target = np.array([-5.0])  # unreachable with positive weights
    with pytest.raises(CalibrationError):
        solve_calibration(problem)


def test_more_constraints_than_sample_errors():
    aux = np.random.default_rng(1).standard_normal((6, 3))
    included = np.zeros(6, dtype=bool)
    included[:2] = True
    base = np.full(6, np.nan)
    base[:2] = 1.0
    problem = CalibrationProblem(aux=aux, included=included, base_weights=base)
    with pytest.raises(CalibrationError):
        solve_calibration(problem)
