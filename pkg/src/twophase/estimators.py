"""The five design-weighted estimators and the two-phase variance.

Each estimator is a weight-layer pipeline over the weighted GLM fitter:

* ``ipw``        w = d
* ``gr``         w = d g,   g raked on plug-in influence-function auxiliaries
* ``stab_z``     w = d q(Z),       q estimated on phase-1 covariates
* ``stab_xz``    w = d q(X, Z),    q estimated on all model covariates
* ``stab_rake``  w = d q(Z) g,  g solved under the stabilised constraints
* ``mle_cc``     intercept-corrected case-control MLE (benchmark, not
  design-based)

All design-based variants solve the same weighted score equation for the
same coefficient vector when the marginal mean model is correctly
specified; they differ only in precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import glm
from .raking import stabilised_rake
from .stabiliser import StabiliserFn, case_control_q, estimate_q_smoothed
from .weights import WeightSet

ESTIMATOR_KINDS = ("ipw", "gr", "stab_z", "stab_xz", "stab_rake", "mle_cc")


class EstimatorError(RuntimeError):
    pass


class UnsupportedCombinationError(EstimatorError):
    """Requested weight layers cannot be combined (e.g. q(x,z) with raking)."""


@dataclass
class EstimatorOptions:
    """Knobs shared by the estimator pipelines.

    ``q_method`` is ``auto`` (closed form when the design is case-control,
    i.e. strata are outcome-pure; smoothed otherwise), ``smoothed``, or
    ``closed_form``.  ``force_unit_q`` replaces the stabiliser by 1 (used
    to check that stabilised raking collapses to plain raking).
    """

    distance: str = "raking"
    q_method: str = "auto"
    imputation_columns: tuple | None = None
    stab_z_conditioning: tuple | None = None
    stab_xz_conditioning: tuple | None = None
    clip_scale: float = 1e-6
    force_unit_q: bool = False
    add_constant_aux: bool = True


@dataclass(frozen=True)
class EstimateReport:
    """One estimator's coefficients, design variance, and diagnostics."""

    estimator: str
    beta: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    coef_names: tuple
    weight_set: WeightSet | None
    diagnostics: dict


def _outcome_pure_strata(design, y):
    """True when every stratum holds a single outcome value (case-control)."""
    codes, _, _ = design.stratum_arrays()
    for code in np.unique(codes):
        vals = y[codes == code]
        if np.unique(vals).shape[0] > 1:
            return False
    return True


def build_plugin_auxiliaries(frame, design, spec, imputation_columns=None):
    """Influence-function auxiliaries via the plug-in recipe.

    Each phase-2 regressor is imputed by a design-weighted linear
    regression on phase-1 columns over the sampled rows, predicted for all
    rows; the outcome model is then fit on the full cohort with the imputed
    regressors, and that fit's influence functions are returned (one column
    per model coefficient).
    """
    spec.validate(frame)
    rows = np.flatnonzero(design.included)
    d = design.design_weights[rows]
    phase2_cols = spec.phase2_regressors(frame)
    if imputation_columns is None:
        imputation_columns = tuple(
            spec.phase1_regressors(frame)
            + frame.columns_with_role("auxiliary")
            + [spec.outcome_column]
        )
    imputation_columns = tuple(imputation_columns)
    for col in imputation_columns:
        if frame.role_of(col) == "phase2":
            raise EstimatorError(f"imputation column {col!r} is phase-2")

    replacements = {}
    if phase2_cols:
        X_imp_all = np.column_stack(
            [np.ones(frame.n_rows)] + [frame.column(c) for c in imputation_columns]
        )
        names = ("intercept",) + imputation_columns
        for col in phase2_cols:
            fit = glm.fit_glm_matrix(
                X_imp_all[rows], frame.column(col)[rows], d, "gaussian",
                coef_names=names, rows=rows,
            )
            replacements[col] = X_imp_all @ fit.beta
    frame_imp = frame.with_columns(replacements)
    full_fit = glm.fit_weighted_glm(frame_imp, spec, np.ones(frame.n_rows))
    return full_fit.influence


def two_phase_variance(fit, design, weight_set):
    """Design-consistent covariance of a weighted two-phase fit.

    Sandwich J^{-1} M J^{-T} with M the estimated variance of the weighted
    score total: a phase-1 piece sum_s (q_i^2/pi_i) U_i U_i' on the raw
    scores, plus the phase-2 stratified-SRS covariance double sum applied
    to g_i d_i q_i times the scores (residualised on the calibration
    auxiliaries when a raking layer is present; the covariance of the
    inclusion indicators is zero across strata, so the double sum reduces
    to within-stratum blocks).
    """
    rows = fit.rows
    incl_rows = np.flatnonzero(design.included)
    if not np.array_equal(np.sort(rows), incl_rows):
        raise EstimatorError("fit rows must be exactly the design's sampled rows")

    U = fit.score_matrix
    q = weight_set.stabiliser[rows]
    g = weight_set.raking[rows]
    d = design.design_weights[rows]
    pi = design.pi[rows]

    phase1 = U.T @ (U * (q**2 / pi)[:, None])

    if weight_set.aux is not None:
        A = weight_set.aux[rows]
        bw = d * q
        M_aa = (A * bw[:, None]).T @ A
        M_au = (A * bw[:, None]).T @ U
        try:
            B = np.linalg.solve(M_aa, M_au)
        except np.linalg.LinAlgError:
            raise EstimatorError("singular auxiliary projection in variance") from None
        resid = U - A @ B
    else:
        resid = U

    a = (g * d * q)[:, None] * resid
    phase2 = a.T @ (a * (1.0 - pi)[:, None])
    codes, pop_counts, samp_counts = design.stratum_arrays()
    codes = codes[rows]
    for h in np.unique(codes):
        N_h = pop_counts[h]
        n_h = samp_counts[h]
        if n_h < 2:
            continue  # no within-stratum pairs to correct with
        c_h = 1.0 - n_h * (N_h - 1) / (N_h * (n_h - 1))
        block = a[codes == h]
        T_h = block.sum(axis=0)
        phase2 += c_h * (np.outer(T_h, T_h) - block.T @ block)

    M = phase1 + phase2
    J = fit.jacobian
    try:
        V = np.linalg.solve(J, np.linalg.solve(J, M).T)
    except np.linalg.LinAlgError:
        raise EstimatorError("singular jacobian in variance sandwich") from None
    return 0.5 * (V + V.T)


def _closed_form_q_all_rows(frame, design, spec, conditioning):
    """Case-control q(z) on all rows: p(z) from a phase-1 logistic fit."""
    y = frame.column(spec.outcome_column)
    n_cases = int(np.sum(y == 1))
    if conditioning:
        marginal_spec = _respec(spec, conditioning)
        sub = glm.fit_weighted_glm(frame, marginal_spec, np.ones(frame.n_rows))
        p_hat = sub.fitted
    else:
        p_hat = np.full(frame.n_rows, n_cases / frame.n_rows)
    return case_control_q(p_hat, frame.n_rows, n_cases)


def _respec(spec, regressors):
    from .frame import ModelSpec

    return ModelSpec(spec.family, spec.outcome_column, tuple(regressors))


class _SuiteContext:
    """Shared intermediates so one replicate never fits the same model twice."""

    def __init__(self, frame, design, spec, options):
        self.frame = frame
        self.design = design
        self.spec = spec
        self.options = options
        self.rows = np.flatnonzero(design.included)
        self._cache = {}
        spec.validate(frame)
        frame.check_design_missingness(design)

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def ipw_fit(self):
        return self._get("ipw_fit", lambda: glm.fit_weighted_glm(
            self.frame, self.spec, self.design.design_weights[self.rows], self.rows))

    @property
    def q_method(self):
        def resolve():
            method = self.options.q_method
            if method == "auto":
                y = self.frame.column(self.spec.outcome_column)
                is_cc = (self.spec.family == "binomial"
                         and _outcome_pure_strata(self.design, y))
                return "closed_form" if is_cc else "smoothed"
            if method not in ("smoothed", "closed_form"):
                raise EstimatorError(f"unknown q_method {method!r}")
            return method
        return self._get("q_method", resolve)

    def plugin_aux(self):
        def build():
            G = build_plugin_auxiliaries(
                self.frame, self.design, self.spec,
                imputation_columns=self.options.imputation_columns)
            # Degenerate influence columns (e.g. an interpolating full-data
            # fit has all-zero influence) carry no calibration information.
            scale = max(1.0, float(np.max(np.abs(G))) if G.size else 0.0)
            keep = np.max(np.abs(G), axis=0) > 1e-12 * scale
            G = G[:, keep]
            if self.options.add_constant_aux:
                G = np.column_stack([np.ones(self.frame.n_rows), G])
            elif G.shape[1] == 0:
                raise EstimatorError("no usable raking auxiliaries")
            return G
        return self._get("plugin_aux", build)

    def stab_z_fn(self):
        def build():
            cond = self.options.stab_z_conditioning
            if cond is None:
                cond = tuple(self.spec.phase1_regressors(self.frame))
            for c in cond:
                if self.frame.role_of(c) == "phase2":
                    raise UnsupportedCombinationError(
                        f"phase-1 stabiliser cannot condition on phase-2 column {c!r}")
            if self.options.force_unit_q or not cond:
                return StabiliserFn("unit", tuple(cond), np.ones(self.frame.n_rows),
                                    0.0, 1.0)
            if self.q_method == "closed_form":
                q = _closed_form_q_all_rows(self.frame, self.design, self.spec, cond)
                return StabiliserFn("closed_form_cc", tuple(cond), q, 0.0, 1.0)
            return estimate_q_smoothed(self.frame, self.ipw_fit, self.design, cond,
                                       clip_scale=self.options.clip_scale)
        return self._get("stab_z_fn", build)

    def stab_xz_fn(self):
        def build():
            cond = self.options.stab_xz_conditioning
            if cond is None:
                cond = tuple(self.spec.regressor_columns)
            if self.options.force_unit_q or not cond:
                return StabiliserFn("unit", tuple(cond), np.ones(self.frame.n_rows),
                                    0.0, 1.0)
            if self.q_method == "closed_form":
                y = self.frame.column(self.spec.outcome_column)
                n_cases = int(np.sum(y == 1))
                values = np.full(self.frame.n_rows, np.nan)
                values[self.rows] = case_control_q(
                    self.ipw_fit.fitted, self.frame.n_rows, n_cases)
                return StabiliserFn("closed_form_cc", tuple(cond), values, 0.0, 1.0)
            return estimate_q_smoothed(self.frame, self.ipw_fit, self.design, cond,
                                       clip_scale=self.options.clip_scale)
        return self._get("stab_xz_fn", build)


def _fit_and_report(ctx, kind, weight_set, extra_diag=None):
    weight_set.validate()
    w = weight_set.composite[ctx.rows]
    fit = glm.fit_weighted_glm(ctx.frame, ctx.spec, w, ctx.rows)
    vcov = two_phase_variance(fit, ctx.design, weight_set)
    se = np.sqrt(np.diag(vcov))
    if not np.all(np.isfinite(se)):
        raise EstimatorError(f"{kind}: nonfinite standard errors")
    diagnostics = {"iterations": fit.iterations}
    diagnostics.update(weight_set.diagnostics)
    diagnostics.update(extra_diag or {})
    return EstimateReport(kind, fit.beta, vcov, se, fit.coef_names,
                          weight_set, diagnostics)


def _run_one(ctx, kind):
    options = ctx.options
    if kind == "ipw":
        ws = WeightSet.for_design(ctx.design)
        return _fit_and_report(ctx, kind, ws)
    if kind == "gr":
        ws = stabilised_rake(ctx.design, ctx.plugin_aux(),
                             distance=options.distance)
        return _fit_and_report(ctx, kind, ws)
    if kind == "stab_z":
        qfn = ctx.stab_z_fn()
        ws = WeightSet.for_design(ctx.design, stabiliser=qfn.as_weight_layer(),
                                  diagnostics={"clip_count": qfn.clip_count})
        return _fit_and_report(ctx, kind, ws)
    if kind == "stab_xz":
        qfn = ctx.stab_xz_fn()
        ws = WeightSet.for_design(ctx.design, stabiliser=qfn.as_weight_layer(),
                                  diagnostics={"clip_count": qfn.clip_count})
        return _fit_and_report(
            ctx, kind, ws,
            extra_diag={"q_defined_phase2_only": not qfn.defined_everywhere()})
    if kind == "stab_rake":
        qfn = ctx.stab_z_fn()
        if not qfn.defined_everywhere():
            raise UnsupportedCombinationError(
                "stabilised raking needs q on every phase-1 row; "
                "q(x,z) is unavailable outside the phase-2 sample")
        ws = stabilised_rake(ctx.design, ctx.plugin_aux(),
                             stabilisers=qfn.values,
                             distance=options.distance)
        ws.diagnostics["clip_count"] = qfn.clip_count
        return _fit_and_report(ctx, kind, ws)
    if kind == "mle_cc":
        return _mle_cc_report(ctx)
    raise EstimatorError(f"unknown estimator kind {kind!r}")


def estimate_suite(frame, design, spec, kinds, options=None, on_error="raise"):
    """Run several estimators on one dataset, sharing intermediates.

    Returns {kind: EstimateReport}.  Identical, replicate-for-replicate,
    to calling ``estimate`` once per kind.  With ``on_error="capture"``
    a failing estimator is reported as its exception instead of aborting
    the others.
    """
    options = options or EstimatorOptions()
    ctx = _SuiteContext(frame, design, spec, options)
    reports = {}
    for kind in kinds:
        if on_error == "capture":
            try:
                reports[kind] = _run_one(ctx, kind)
            except Exception as exc:
                reports[kind] = exc
        else:
            reports[kind] = _run_one(ctx, kind)
    return reports


def _mle_cc_report(ctx):
    y = ctx.frame.column(ctx.spec.outcome_column)
    incl = ctx.design.included
    pop_cases = int(np.sum(y == 1))
    pop_controls = int(np.sum(y == 0))
    samp_cases = int(np.sum(incl & (y == 1)))
    samp_controls = int(np.sum(incl & (y == 0)))
    if min(pop_cases, pop_controls, samp_cases, samp_controls) == 0:
        raise EstimatorError("case-control MLE needs sampled cases and controls")
    fractions = (samp_cases / pop_cases, samp_controls / pop_controls)
    fit = glm.mle_case_control(ctx.frame, ctx.spec, fractions, rows=ctx.rows)
    vcov = np.linalg.inv(fit.jacobian)
    vcov = 0.5 * (vcov + vcov.T)
    return EstimateReport(
        "mle_cc", fit.beta, vcov, np.sqrt(np.diag(vcov)), fit.coef_names,
        None, {"iterations": fit.iterations, "sampling_fractions": fractions})


def estimate(kind, frame, design, spec, options=None):
    """Run one estimator; see the module docstring for the roster."""
    return estimate_suite(frame, design, spec, [kind], options)[kind]
