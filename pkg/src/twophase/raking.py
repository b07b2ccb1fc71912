"""Generalised raking: calibrate design weights to auxiliary totals.

Finds per-unit factors g_i that move the weighted sample totals of the
auxiliary variables onto their (possibly stabilised) population totals
while minimising a distance to the base weights.  Two distances are
supported: the exponential ("raking") distance, giving g = exp(a'G), and
the linear ("greg") distance, giving g = 1 + a'G.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .weights import WeightSet

NEWTON_MAX_ITER = 60
NEWTON_TOL = 1e-12
RESIDUAL_LIMIT = 1e-8

_DISTANCE_ALIASES = {
    "raking": "raking", "exponential": "raking",
    "greg": "linear", "linear": "linear",
}


class CalibrationError(RuntimeError):
    """Calibration failed (collinear auxiliaries or no convergence)."""


class CollinearAuxiliariesError(CalibrationError):
    """The calibration system is singular."""


def normalise_distance(distance):
    try:
        return _DISTANCE_ALIASES[distance]
    except KeyError:
        raise CalibrationError(f"unknown distance {distance!r}") from None


@dataclass
class CalibrationProblem:
    """Inputs of one calibration solve.

    ``aux`` holds the auxiliary vectors G_i for all N phase-1 rows,
    ``base_weights`` the design weights on included rows (NaN elsewhere is
    fine), ``stabilisers`` the q_i factors for all rows (ones for standard
    raking).  The target totals default to sum_i q_i G_i over all rows,
    which makes the solved constraints

        sum_i R_i d_i g_i q_i G_i = sum_i q_i G_i.
    """

    aux: np.ndarray
    included: np.ndarray
    base_weights: np.ndarray
    stabilisers: np.ndarray | None = None
    distance: str = "raking"
    target: np.ndarray | None = None

    def __post_init__(self):
        self.aux = np.atleast_2d(np.asarray(self.aux, dtype=float))
        if self.aux.shape[0] == 1 and self.aux.shape[1] > 1:
            self.aux = self.aux.T
        self.included = np.asarray(self.included, dtype=bool)
        self.base_weights = np.asarray(self.base_weights, dtype=float)
        if self.stabilisers is None:
            self.stabilisers = np.ones(self.aux.shape[0])
        self.stabilisers = np.asarray(self.stabilisers, dtype=float)
        self.distance = normalise_distance(self.distance)
        if not np.all(np.isfinite(self.aux)):
            raise CalibrationError("auxiliaries must be fully observed (phase-1)")
        if np.any(self.stabilisers <= 0) or not np.all(np.isfinite(self.stabilisers)):
            raise CalibrationError("stabilisers must be positive and finite")
        if self.target is None:
            self.target = self.stabilisers @ self.aux
        self.target = np.asarray(self.target, dtype=float)
        if not np.all(np.isfinite(self.target)):
            raise CalibrationError("calibration target is not finite")


@dataclass(frozen=True)
class CalibrationResult:
    """Solved raking factors for the included rows, plus diagnostics."""

    g_factors: np.ndarray
    multipliers: np.ndarray
    constraint_residual: float
    iterations: int
    negative_g: bool = False


def _check_aux_rank(G, names=None):
    import scipy.linalg

    _, r, piv = scipy.linalg.qr(G, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = (diag[0] if diag.size else 0.0) * max(G.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < G.shape[1]:
        if names is None:
            names = [f"aux{k}" for k in range(G.shape[1])]
        bad = [names[k] for k in sorted(piv[rank:])]
        raise CollinearAuxiliariesError(
            f"auxiliary columns are collinear over the sample: {bad}"
        )


def _constant_column(G):
    """Index and value of a constant nonzero column, or (None, None)."""
    for k in range(G.shape[1]):
        col = G[:, k]
        if np.ptp(col) == 0.0 and col[0] != 0.0:
            return k, col[0]
    return None, None


def _residual_scale(problem):
    q = problem.stabilisers
    scale = np.max(np.abs(q) @ np.abs(problem.aux))
    return max(scale, float(np.max(np.abs(problem.target))), 1e-12)


def solve_calibration(problem):
    """Solve one calibration problem.

    Linear distance: one linear solve, g = 1 + a'G (negative g allowed but
    flagged).  Exponential distance: damped Newton from a = 0, g = exp(a'G)
    strictly positive.  The returned constraint residual is the max-norm
    constraint gap relative to the scale of the target and is required to
    be below 1e-8.
    """
    incl = problem.included
    G_all = problem.aux
    n_incl = int(incl.sum())
    if n_incl < G_all.shape[1]:
        raise CalibrationError(
            f"{n_incl} sampled rows cannot meet {G_all.shape[1]} constraints"
        )
    G = G_all[incl]
    _check_aux_rank(G)
    b = problem.base_weights[incl] * problem.stabilisers[incl]
    if not np.all(np.isfinite(b)) or np.any(b <= 0):
        raise CalibrationError("base weights must be positive on sampled rows")
    target = problem.target

    # Centering the non-constant columns is an exact reparameterisation
    # when a constant column is present; without one it would change the
    # constraint set, so solve raw in that case.
    const_idx, const_val = _constant_column(G)
    shift = np.zeros(G.shape[1])
    if const_idx is not None:
        q_total = float(np.sum(problem.stabilisers))
        shift = (problem.stabilisers @ G_all) / q_total
        shift[const_idx] = 0.0
        G = G - shift
        target = target - shift * (target[const_idx] / const_val)

    if problem.distance == "linear":
        gap = target - b @ G
        M = (G * b[:, None]).T @ G
        try:
            alpha = np.linalg.solve(M, gap)
        except np.linalg.LinAlgError:
            raise CollinearAuxiliariesError("singular linear calibration system") from None
        g = 1.0 + G @ alpha
        iterations = 1
    else:
        alpha = np.zeros(G.shape[1])
        g = np.ones(n_incl)
        resid = b @ G - target
        iterations = 0
        scale = max(float(np.max(np.abs(target))), float(np.max(np.abs(b @ np.abs(G)))), 1e-12)
        for iterations in range(1, NEWTON_MAX_ITER + 1):
            if np.max(np.abs(resid)) <= NEWTON_TOL * scale:
                break
            bw = b * g
            H = (G * bw[:, None]).T @ G
            try:
                step = np.linalg.solve(H, resid)
                if not np.all(np.isfinite(step)):
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                # near-singular far from the solution: take the
                # minimum-norm step and let the line search decide
                step = np.linalg.lstsq(H, resid, rcond=None)[0]
                if not np.all(np.isfinite(step)):
                    raise CollinearAuxiliariesError("singular raking system") from None
            # step-halving line search on the constraint gap
            t = 1.0
            base_norm = np.max(np.abs(resid))
            for _ in range(40):
                trial = alpha - t * step
                g_try = np.exp(G @ trial)
                resid_try = (b * g_try) @ G - target
                if np.all(np.isfinite(resid_try)) and np.max(np.abs(resid_try)) < base_norm:
                    alpha, g, resid = trial, g_try, resid_try
                    break
                t *= 0.5
            else:
                raise CalibrationError(
                    f"raking line search stalled; residual {base_norm:.3e}"
                )
        else:
            raise CalibrationError(
                f"raking did not converge; residual {np.max(np.abs(resid)):.3e}"
            )

    # Map multipliers back to the uncentered auxiliaries.
    if const_idx is not None:
        alpha_full = alpha.copy()
        alpha_full[const_idx] = alpha[const_idx] - float(alpha @ shift) / const_val
    else:
        alpha_full = alpha

    # Verify against the original, uncentered system.
    achieved = (problem.base_weights[incl] * problem.stabilisers[incl] * g) @ G_all[incl]
    residual = float(np.max(np.abs(achieved - problem.target))) / _residual_scale(problem)
    if residual > RESIDUAL_LIMIT:
        raise CalibrationError(f"constraint residual {residual:.3e} exceeds {RESIDUAL_LIMIT}")

    return CalibrationResult(
        g_factors=g,
        multipliers=alpha_full,
        constraint_residual=residual,
        iterations=iterations,
        negative_g=bool(np.any(g <= 0)),
    )


def stabilised_rake(design, aux, stabilisers=None, distance="raking"):
    """Rake a design's weights under (optionally) stabilised constraints.

    Solves the constraints directly on sum_i R_i d_i g_i q_i G_i =
    sum_i q_i G_i and returns the layered weights d, q, g as a WeightSet.
    With q identically one this is standard raking.
    """
    n = design.n_rows
    q = np.ones(n) if stabilisers is None else np.asarray(stabilisers, dtype=float)
    problem = CalibrationProblem(
        aux=aux,
        included=design.included,
        base_weights=design.design_weights,
        stabilisers=q,
        distance=distance,
    )
    result = solve_calibration(problem)
    g = np.ones(n)
    g[design.included] = result.g_factors
    return WeightSet.for_design(
        design,
        stabiliser=q,
        raking=g,
        aux=problem.aux,
        diagnostics={
            "calibration_iterations": result.iterations,
            "constraint_residual": result.constraint_residual,
            "negative_g": result.negative_g,
        },
    )
