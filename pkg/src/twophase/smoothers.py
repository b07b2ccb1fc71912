"""Weighted local-linear kernel regression with rule-of-thumb bandwidths.

One smoother serves every stabiliser estimate: a Gaussian product kernel,
local-linear fit at each evaluation point, bandwidth 1.06 * sd * m^(-1/5)
per continuous dimension.  Columns with few distinct values are treated as
categorical and handled by exact group means, with any continuous columns
smoothed within each group.
"""

from __future__ import annotations

import numpy as np

DISCRETE_MAX_LEVELS = 10
_CHUNK = 512


class SmootherError(RuntimeError):
    """Degenerate smoothing problem."""


def rule_of_thumb_bandwidth(x, m=None):
    """1.06 * sd(x) * m^(-1/5); raises on zero-variance input."""
    x = np.asarray(x, dtype=float)
    if m is None:
        m = x.shape[0]
    sd = float(np.std(x))
    if sd <= 0:
        raise SmootherError("conditioning column has zero variance")
    return 1.06 * sd * m ** (-0.2)


def is_discrete(x, max_levels=DISCRETE_MAX_LEVELS):
    return np.unique(np.asarray(x)).shape[0] <= max_levels


def _local_linear(x_train, responses, weights, x_eval, bandwidths):
    """Local-linear fit of each response column at each evaluation point.

    x_train : (m, k), responses : (m, r), weights : (m,), x_eval : (E, k).
    Returns (E, r).  All responses share kernel weights.

    The per-point weighted normal equations are assembled from kernel
    moments of the monomials {1, x_j, x_j x_l, y_r, x_j y_r} (one kernel
    GEMM per chunk) and the shift identities sum K w (x-t)^a, so the inner
    loop is a batched (k+1)x(k+1) solve.
    """
    m, k = x_train.shape
    E = x_eval.shape[0]
    r = responses.shape[1]

    # moment columns: w * [1, x_j, x_j x_l (j<=l), y_r, x_j y_r]
    cols = [np.ones(m)]
    cols += [x_train[:, j] for j in range(k)]
    quad_index = {}
    for j in range(k):
        for l in range(j, k):
            quad_index[(j, l)] = len(cols)
            cols.append(x_train[:, j] * x_train[:, l])
    resp_index = []
    for s in range(r):
        resp_index.append(len(cols))
        cols.append(responses[:, s])
        for j in range(k):
            cols.append(x_train[:, j] * responses[:, s])
    moments_in = np.column_stack(cols) * weights[:, None]

    inv_h2 = 1.0 / (2.0 * bandwidths**2)
    out = np.empty((E, r))
    eye = np.eye(k + 1)
    for start in range(0, E, _CHUNK):
        pts = x_eval[start:start + _CHUNK]
        c = pts.shape[0]
        sq = np.zeros((c, m))
        for j in range(k):
            diff = pts[:, j, None] - x_train[None, :, j]
            sq += inv_h2[j] * diff * diff
        kern = np.exp(-sq)
        M = kern @ moments_in  # (c, n_cols)

        S = np.empty((c, k + 1, k + 1))
        S[:, 0, 0] = M[:, 0]
        for j in range(k):
            S[:, 0, j + 1] = S[:, j + 1, 0] = M[:, 1 + j] - pts[:, j] * M[:, 0]
        for j in range(k):
            for l in range(j, k):
                v = (M[:, quad_index[(j, l)]]
                     - pts[:, j] * M[:, 1 + l]
                     - pts[:, l] * M[:, 1 + j]
                     + pts[:, j] * pts[:, l] * M[:, 0])
                S[:, j + 1, l + 1] = S[:, l + 1, j + 1] = v
        T = np.empty((c, k + 1, r))
        for s in range(r):
            base = resp_index[s]
            T[:, 0, s] = M[:, base]
            for j in range(k):
                T[:, j + 1, s] = M[:, base + 1 + j] - pts[:, j] * M[:, base]
        # tiny ridge keeps isolated evaluation points solvable
        ridge = 1e-10 * np.trace(S, axis1=1, axis2=2) / (k + 1)
        S = S + ridge[:, None, None] * eye[None, :, :]
        coef = np.linalg.solve(S, T)
        out[start:start + c] = coef[:, 0, :]
    return out


def _group_keys(cols):
    """Integer key per row for the cross-classification of columns."""
    if not cols:
        return None, None
    stacked = np.column_stack(cols)
    uniq, codes = np.unique(stacked, axis=0, return_inverse=True)
    return uniq, codes


def smooth_conditional_mean(train, responses, weights, evaluate,
                            discrete_mask=None):
    """Weighted conditional-mean estimate of each response column.

    Parameters
    ----------
    train : (m, k) conditioning values where the responses are observed.
    responses : (m,) or (m, r) response values.
    weights : (m,) regression weights (e.g. design weights).
    evaluate : (E, k) points at which to evaluate the fitted means.
    discrete_mask : optional boolean (k,) marking categorical columns;
        inferred from the number of distinct values when omitted.

    Categorical columns are matched exactly (group means); continuous
    columns are smoothed by local-linear Gaussian-kernel regression inside
    each group.  Raises SmootherError when a group present in ``evaluate``
    was never observed in ``train``.
    """
    train = np.atleast_2d(np.asarray(train, dtype=float))
    if train.shape[0] == 1 and train.shape[1] > 1:
        train = train.T
    evaluate = np.atleast_2d(np.asarray(evaluate, dtype=float))
    if evaluate.shape[0] == 1 and evaluate.shape[1] > 1:
        evaluate = evaluate.T
    responses = np.asarray(responses, dtype=float)
    squeeze = responses.ndim == 1
    if squeeze:
        responses = responses[:, None]
    weights = np.asarray(weights, dtype=float)

    m, k = train.shape
    if evaluate.shape[1] != k:
        raise SmootherError("evaluation points have wrong dimension")
    if discrete_mask is None:
        discrete_mask = np.array([is_discrete(train[:, j]) for j in range(k)])
    else:
        discrete_mask = np.asarray(discrete_mask, dtype=bool)

    cont = np.flatnonzero(~discrete_mask)
    disc = np.flatnonzero(discrete_mask)

    out = np.empty((evaluate.shape[0], responses.shape[1]))
    if disc.size == 0:
        bw = np.array([rule_of_thumb_bandwidth(train[:, j], m) for j in cont])
        out[:] = _local_linear(train[:, cont], responses, weights,
                               evaluate[:, cont], bw)
    else:
        levels, codes = _group_keys([train[:, j] for j in disc])
        level_index = {tuple(lev): g for g, lev in enumerate(levels)}
        eval_keys = np.column_stack([evaluate[:, j] for j in disc])
        for g in range(levels.shape[0]):
            in_group = codes == g
            at_eval = np.all(eval_keys == levels[g], axis=1)
            if not np.any(at_eval):
                continue
            wg = weights[in_group]
            if wg.sum() <= 0:
                raise SmootherError("empty smoothing group")
            if cont.size == 0:
                out[at_eval] = (wg @ responses[in_group]) / wg.sum()
            else:
                bw = np.array([
                    rule_of_thumb_bandwidth(train[in_group, j], int(in_group.sum()))
                    for j in cont
                ])
                out[at_eval] = _local_linear(
                    train[np.ix_(in_group, cont)], responses[in_group], wg,
                    evaluate[np.ix_(at_eval, cont)], bw)
        unseen = [tuple(key) for key in eval_keys if tuple(key) not in level_index]
        if unseen:
            raise SmootherError(
                f"evaluation requires unobserved category levels: {sorted(set(unseen))[:5]}"
            )
    return out[:, 0] if squeeze else out
