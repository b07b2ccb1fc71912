"""Optimal weight-stabilisation factors q().

The stabiliser multiplies design weights by a covariate function chosen to
remove weight variation explained by model covariates without changing the
estimand.  Two estimates are provided: the closed form available under
case-control sampling of a binary outcome, and a smoother-based ratio of
conditional second moments for general stratified designs:

    q = E[e^2 | cond] / E[d e^2 | cond]   (up to proportionality),

with both conditional means estimated by design-weighted local-linear
kernel regression of the squared fit residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .smoothers import SmootherError, smooth_conditional_mean

CLIP_SCALE = 1e-6


class StabiliserError(RuntimeError):
    """Degenerate stabilisation request."""


@dataclass(frozen=True)
class StabiliserFn:
    """Fitted stabilisation factors.

    ``values`` is frame-length with NaN on rows where the factors are not
    defined (conditioning involves phase-2 columns).  Factors are positive,
    normalised to weighted mean one; the scale is arbitrary and recorded in
    ``normalisation``.  ``clip_count`` counts evaluation rows where the
    denominator-floor engaged; ``envelope_count`` counts rows where the raw
    ratio fell outside the feasible band [1/max d, 1/min d] and was clamped
    (the target ratio always lies inside that band, so excursions are
    smoother noise).
    """

    kind: str
    inputs: tuple
    values: np.ndarray
    clip_floor: float
    normalisation: float
    clip_count: int = 0
    envelope_count: int = 0

    def as_weight_layer(self):
        """Frame-length factor vector with ones where q is undefined."""
        return np.where(np.isfinite(self.values), self.values, 1.0)

    def defined_everywhere(self):
        return bool(np.all(np.isfinite(self.values)))


def case_control_q(p_hat, n_total, n_cases):
    """Closed-form optimal stabiliser for 1:1-style case-control sampling.

    q_i = 1 / ((1 - p_i) + ((N - n_cases)/n_cases) * p_i) for predicted
    outcome probabilities p_i.  ``n_cases`` is the population case count
    (all cases are sampled), ``n_total`` the cohort size.
    """
    p = np.asarray(p_hat, dtype=float)
    if n_cases <= 0 or n_cases >= n_total:
        raise StabiliserError("degenerate case-control design: no cases or no controls")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise StabiliserError("predicted probabilities must lie in [0, 1]")
    ratio = (n_total - n_cases) / n_cases
    return 1.0 / ((1.0 - p) + ratio * p)


def estimate_q_smoothed(frame, fit, design, conditioning, clip_scale=CLIP_SCALE):
    """Ratio-of-smooths stabiliser estimate from a design-weighted fit.

    The numerator smooth regresses the squared residuals e_i^2, and the
    denominator smooth regresses d_i e_i^2, both design-weighted, on the
    conditioning columns over the sampled rows.  The ratio is clipped below
    by ``clip_scale`` times the weighted mean of the denominator response
    and normalised to weighted mean one.  Conditioning on phase-1 columns
    yields factors on all rows; conditioning involving a phase-2 column
    yields factors on the sampled rows only.
    """
    conditioning = tuple(conditioning)
    if not conditioning:
        raise StabiliserError("empty conditioning set")
    rows = fit.rows
    incl_rows = np.flatnonzero(design.included)
    if rows.shape != incl_rows.shape or not np.array_equal(np.sort(rows), incl_rows):
        raise StabiliserError("fit must cover exactly the design's sampled rows")

    d = design.design_weights[rows]
    e2 = fit.residual_scalar**2
    zero_scale = 1e-12 * (1.0 + float(np.max(np.abs(fit.fitted))))
    if np.max(e2) <= zero_scale**2:
        raise StabiliserError("all residuals are zero; nothing to stabilise")
    responses = np.column_stack([e2, d * e2])

    train = frame.matrix(conditioning)[rows]
    phase1_only = all(frame.role_of(c) != "phase2" for c in conditioning)
    if phase1_only:
        eval_rows = np.arange(frame.n_rows)
    else:
        eval_rows = rows
    evaluate = frame.matrix(conditioning)[eval_rows]

    smooth = smooth_conditional_mean(train, responses, d, evaluate)
    num, den = smooth[:, 0], smooth[:, 1]
    floor = clip_scale * float(d @ (d * e2)) / float(d.sum())
    clip_count = int(np.sum((num < floor) | (den < floor)))
    q = np.maximum(num, floor) / np.maximum(den, floor)

    # E[e^2|.] / E[d e^2|.] cannot leave [1/max d, 1/min d]; estimates that
    # do are boundary noise of the smooths and would inflate the weights.
    lo, hi = 1.0 / float(d.max()), 1.0 / float(d.min())
    envelope_count = int(np.sum((q < lo) | (q > hi)))
    q = np.clip(q, lo, hi)

    if phase1_only:
        norm = float(np.mean(q))
    else:
        norm = float(d @ q) / float(d.sum())
    q = q / norm

    values = np.full(frame.n_rows, np.nan)
    values[eval_rows] = q
    return StabiliserFn(
        kind="smoothed_ratio",
        inputs=conditioning,
        values=values,
        clip_floor=floor,
        normalisation=norm,
        clip_count=clip_count,
        envelope_count=envelope_count,
    )
