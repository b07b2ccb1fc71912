"""Weighted generalised linear models via iteratively reweighted least squares.

Canonical links only (gaussian-identity, binomial-logit), which makes the
per-unit score e_i * x_i with e_i = y_i - mu_i.  Every fit exposes the
pieces the design-based variance machinery needs: per-unit scores, the
(negated) score derivative, and per-unit influence functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

MAX_ITER = 50
COEF_TOL = 1e-10
SCORE_TOL = 1e-10
SEPARATION_BOUND = 30.0


class GlmError(RuntimeError):
    """Base class for fitting failures."""


class SingularDesignError(GlmError):
    """Design matrix is rank deficient on the positively weighted rows."""


class SeparationError(GlmError):
    """Logistic coefficients diverged (separated data)."""


class ConvergenceError(GlmError):
    """IRLS failed to converge within the iteration cap."""


@dataclass(frozen=True)
class GlmFit:
    """Converged weighted GLM fit.

    Attributes
    ----------
    beta : (p,) coefficient vector, intercept first.
    score_matrix : (m, p) per-unit scores U_i = e_i * x_i (unweighted).
    residual_scalar : (m,) e_i = y_i - mu_i.
    fitted : (m,) mu_i at beta.
    jacobian : (p, p) negated derivative of the weighted score,
        sum_i w_i v_i x_i x_i^T; symmetric positive definite.
    influence : (m, p) rows h_i = m * jacobian^{-1} w_i U_i, so that the
        fit's coefficient is approximately its mean plus the truth and a
        leave-one-out refit moves beta by about -h_i / m.  Zero-weight
        rows have zero influence.
    weights : (m,) the weights the fit was solved with.
    rows : (m,) frame row indices the fit used.
    coef_names : names aligned with beta.
    converged, iterations : solver diagnostics.
    """

    beta: np.ndarray
    score_matrix: np.ndarray
    residual_scalar: np.ndarray
    fitted: np.ndarray
    jacobian: np.ndarray
    influence: np.ndarray
    weights: np.ndarray
    rows: np.ndarray
    coef_names: tuple
    family: str
    converged: bool
    iterations: int

    @property
    def n_rows(self):
        return self.score_matrix.shape[0]


def _family_mean_var(family, eta):
    if family == "gaussian":
        return eta, np.ones_like(eta)
    mu = expit(eta)
    return mu, mu * (1.0 - mu)


def _check_rank(X, w, coef_names):
    """Raise SingularDesignError naming dependent columns, if any."""
    sw = np.sqrt(w)[:, None] * X
    _, r, piv = scipy.linalg.qr(sw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        raise SingularDesignError("empty design matrix")
    tol = diag[0] * max(sw.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        bad = [coef_names[k] for k in sorted(piv[rank:])]
        raise SingularDesignError(
            f"design matrix is rank deficient; dependent columns: {bad}"
        )


def fit_glm_matrix(X, y, weights, family, offset=None, coef_names=None,
                   rows=None):
    """Solve the weighted score equation sum_i w_i U_i(beta) = 0.

    Parameters
    ----------
    X : (m, p) design matrix including any intercept column.
    y : (m,) outcome.
    weights : (m,) nonnegative, not all zero.
    family : "gaussian" or "binomial".
    offset : optional (m,) added to the linear predictor.

    Zero-weight rows do not influence the solution; their scores are still
    reported (NaN if their data is missing) and their influence rows are
    zero.  Raises SingularDesignError / SeparationError / ConvergenceError.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    m, p = X.shape
    if coef_names is None:
        coef_names = tuple(f"b{k}" for k in range(p))
    if rows is None:
        rows = np.arange(m)
    if offset is None:
        offset = np.zeros(m)

    if w.shape != (m,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise GlmError("weights must be finite and nonnegative")
    active = w > 0
    if not np.any(active):
        raise GlmError("all weights are zero")
    if not np.all(np.isfinite(X[active])) or not np.all(np.isfinite(y[active])):
        raise GlmError("nonfinite data on positively weighted rows")
    _check_rank(X[active], w[active], coef_names)

    Xa, ya, wa, offa = X[active], y[active], w[active], offset[active]
    beta = np.zeros(p)
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        eta = Xa @ beta + offa
        mu, v = _family_mean_var(family, eta)
        score = Xa.T @ (wa * (ya - mu))
        if np.max(np.abs(score)) < SCORE_TOL * max(1.0, np.max(wa)):
            converged = True
            break
        J = (Xa * (wa * v)[:, None]).T @ Xa
        try:
            step = np.linalg.solve(J, score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"singular information matrix: {exc}") from None
        beta = beta + step
        if family == "binomial" and np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(
                f"coefficients diverged beyond {SEPARATION_BOUND}; data appear separated"
            )
        if np.max(np.abs(step)) < COEF_TOL * (1.0 + np.max(np.abs(beta))):
            converged = True
            break

    eta = Xa @ beta + offa
    mu, v = _family_mean_var(family, eta)
    if not converged:
        gnorm = float(np.max(np.abs(Xa.T @ (wa * (ya - mu)))))
        raise ConvergenceError(
            f"no convergence after {MAX_ITER} iterations; score max-norm {gnorm:.3e}"
        )

    # Per-unit quantities on all m rows (zero-weight rows included).
    eta_all = np.where(np.isfinite(X).all(axis=1), X @ beta + offset, np.nan)
    mu_all, v_all = _family_mean_var(family, eta_all)
    e_all = y - mu_all
    U = e_all[:, None] * X

    J = (Xa * (wa * v)[:, None]).T @ Xa
    J = 0.5 * (J + J.T)
    wU = np.where(active[:, None], w[:, None] * U, 0.0)
    try:
        influence = m * np.linalg.solve(J, wU.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(f"singular jacobian: {exc}") from None

    return GlmFit(
        beta=beta,
        score_matrix=U,
        residual_scalar=e_all,
        fitted=mu_all,
        jacobian=J,
        influence=influence,
        weights=w,
        rows=np.asarray(rows),
        coef_names=tuple(coef_names),
        family=family,
        converged=True,
        iterations=iterations,
    )


def _resolve_rows(n_rows, rows):
    if rows is None:
        return np.arange(n_rows)
    rows = np.asarray(rows)
    if rows.dtype == bool:
        if rows.shape != (n_rows,):
            raise GlmError("boolean row mask must match frame length")
        return np.flatnonzero(rows)
    return rows.astype(int)


def design_matrix(frame, spec, rows=None):
    """[1, regressors...] over the requested rows."""
    rows = _resolve_rows(frame.n_rows, rows)
    cols = [np.ones(rows.shape[0])]
    cols += [frame.column(name)[rows] for name in spec.regressor_columns]
    return np.column_stack(cols), rows


def fit_weighted_glm(frame, spec, weights, rows=None):
    """Fit the spec'd model on a row subset of a frame.

    ``weights`` may be given per selected row or per frame row (the row
    subset is then applied to it).  For gaussian-identity this is weighted
    least squares; for binomial-logit, IRLS under the logit link.
    """
    spec.validate(frame)
    X, row_idx = design_matrix(frame, spec, rows)
    y = frame.column(spec.outcome_column)[row_idx]
    w = np.asarray(weights, dtype=float)
    if w.shape == (frame.n_rows,) and row_idx.shape[0] != frame.n_rows:
        w = w[row_idx]
    if w.shape != (row_idx.shape[0],):
        raise GlmError("weights must align with the frame or the row subset")
    offset = None
    if spec.offset is not None:
        offset = np.asarray(spec.offset, dtype=float)[row_idx]
    return fit_glm_matrix(X, y, w, spec.family, offset=offset,
                          coef_names=spec.coef_names, rows=row_idx)


def influence_functions(fit):
    """Per-unit influence rows of a converged fit.

    h_i = m * J^{-1} w_i U_i with m the fit's row count, so the weighted
    rows sum to ~0 and a leave-one-out refit shifts beta by about -h_i/m.
    """
    if not fit.converged:
        raise GlmError("influence functions require a converged fit")
    return fit.influence


def mle_case_control(frame, spec, sampling_fractions, rows=None):
    """Case-control logistic MLE with the intercept-offset correction.

    Runs the ordinary unweighted logistic fit on the case-control sample,
    then shifts the intercept by -log(f_cases / f_controls), where the
    ``sampling_fractions`` are (cases, controls) sampling rates in (0, 1].
    The returned fit carries the sample-scale scores/jacobian (the shift
    is a translation, so curvature-based variances are unchanged) and the
    corrected coefficient vector.
    """
    f_cases, f_controls = sampling_fractions
    if not (0 < f_cases <= 1 and 0 < f_controls <= 1):
        raise GlmError("sampling fractions must lie in (0, 1]")
    if spec.family != "binomial":
        raise GlmError("case-control correction applies to binomial-logit only")
    X, row_idx = design_matrix(frame, spec, rows)
    y = frame.column(spec.outcome_column)[row_idx]
    fit = fit_glm_matrix(X, y, np.ones(row_idx.shape[0]), "binomial",
                         coef_names=spec.coef_names, rows=row_idx)
    beta = fit.beta.copy()
    beta[0] -= np.log(f_cases / f_controls)
    return GlmFit(
        beta=beta,
        score_matrix=fit.score_matrix,
        residual_scalar=fit.residual_scalar,
        fitted=fit.fitted,
        jacobian=fit.jacobian,
        influence=fit.influence,
        weights=fit.weights,
        rows=fit.rows,
        coef_names=fit.coef_names,
        family=fit.family,
        converged=fit.converged,
        iterations=fit.iterations,
    )
