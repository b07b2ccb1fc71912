"""Layered weights: base design weights times stabiliser and raking factors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class WeightSet:
    """One estimator's weights, kept as separate layers.

    All arrays are frame-length.  ``base`` is the design weight d_i (NaN
    off-sample), ``stabiliser`` the q_i factor (1 where unused), ``raking``
    the g_i factor (1 off-sample and for unraked estimators).  The layers
    stay separate because the variance estimator addresses q and g
    individually.  ``aux`` records the calibration auxiliaries the g
    factors were solved against (None when no raking layer).
    """

    base: np.ndarray
    stabiliser: np.ndarray
    raking: np.ndarray
    included: np.ndarray
    aux: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @staticmethod
    def for_design(design, stabiliser=None, raking=None, aux=None,
                   diagnostics=None):
        n = design.n_rows
        q = np.ones(n) if stabiliser is None else np.asarray(stabiliser, dtype=float)
        g = np.ones(n) if raking is None else np.asarray(raking, dtype=float)
        return WeightSet(
            base=design.design_weights,
            stabiliser=q,
            raking=g,
            included=design.included,
            aux=aux,
            diagnostics=dict(diagnostics or {}),
        )

    @property
    def composite(self):
        """w_i = d_i q_i g_i; NaN outside the phase-2 sample."""
        return self.base * self.stabiliser * self.raking

    def validate(self):
        incl = self.included
        w = self.composite[incl]
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("composite weights must be positive on sampled rows")
        return self
