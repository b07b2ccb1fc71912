import numpy as np
import pytest

from twophase import ModelSpec, PopulationFrame, attach_design


def make_linear_frame(n=200, seed=0, beta=(0.0, 1.5, 1.0), sigma=1.0):
    """Small two-phase-style frame: y ~ x + z, a = x + noise."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    x = 0.3 + z + rng.standard_normal(n)
    a = x + rng.standard_normal(n)
    y = beta[0] + beta[1] * x + beta[2] * z + sigma * rng.standard_normal(n)
    frame = PopulationFrame(
        {"y": y, "x": x, "z": z, "a": a},
        {"y": "outcome", "x": "phase2", "z": "phase1", "a": "auxiliary"},
    )
    return frame


def make_stratified_design(frame, fractions=(0.15, 0.5), cut_q=0.8, seed=1):
    """Two strata on z with different sampling fractions."""
    rng = np.random.default_rng(seed)
    z = frame.column("z")
    strata = (z > np.quantile(z, cut_q)).astype(int)
    included = np.zeros(frame.n_rows, dtype=bool)
    for h, frac in enumerate(fractions):
        idx = np.flatnonzero(strata == h)
        take = max(2, int(round(frac * idx.size)))
        included[rng.choice(idx, size=take, replace=False)] = True
    return attach_design(frame, strata, included)


@pytest.fixture
def linear_frame():
    return make_linear_frame()


@pytest.fixture
def linear_spec():
    return ModelSpec("gaussian", "y", ("x", "z"))
