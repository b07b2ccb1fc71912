import itertools
from fractions import Fraction

import numpy as np
import pytest

from twophase import (
    DesignError,
    FrameError,
    ModelSpec,
    PopulationFrame,
    attach_design,
    read_frame_csv,
)


def test_attach_design_single_stratum_half_sampled():
    frame = PopulationFrame({"y": [1.0, 2.0, 3.0, 4.0]}, {"y": "outcome"})
    design = attach_design(frame, [0, 0, 0, 0], [True, False, True, False])
    assert np.allclose(design.pi, 0.5)
    assert np.allclose(design.design_weights[design.included], 2.0)
    assert design.stratum_counts[0] == (4, 2)


def test_attach_design_census_is_identity():
    frame = PopulationFrame({"y": np.arange(5.0)}, {"y": "outcome"})
    design = attach_design(frame, np.zeros(5, int), np.ones(5, bool))
    assert np.all(design.pi == 1.0)
    assert np.all(design.design_weights == 1.0)


def test_attach_design_two_strata_fractions_and_joint():
    # strata sizes (90, 10) with (9, 5) sampled
    strata = np.repeat([0, 1], [90, 10])
    included = np.zeros(100, dtype=bool)
    included[:9] = True
    included[90:95] = True
    frame = PopulationFrame({"y": np.zeros(100)}, {"y": "outcome"})
    design = attach_design(frame, strata, included)
    assert np.allclose(design.pi[:90], 0.1)
    assert np.allclose(design.pi[90:], 0.5)
    # oracle: direct rational evaluation of the stratified-SRS formula
    expected = Fraction(9 * 8, 90 * 89)
    assert design.joint_inclusion(0, 1) == pytest.approx(float(expected), rel=1e-12)
    assert float(expected) == pytest.approx(0.008989, abs=5e-7)


def enumeration_joint_probability(N_h, n_h):
    """Enumerate all C(N_h, n_h) samples; count co-inclusions of units 0, 1."""
    total = 0
    hits = 0
    for sample in itertools.combinations(range(N_h), n_h):
        total += 1
        if 0 in sample and 1 in sample:
            hits += 1
    return Fraction(hits, total)


def test_joint_inclusion_within_stratum_matches_enumeration():
    oracle = enumeration_joint_probability(5, 2)  # = 1/10
    frame = PopulationFrame({"y": np.zeros(5)}, {"y": "outcome"})
    design = attach_design(frame, np.zeros(5, int), [True, True, False, False, False])
    assert design.joint_inclusion(0, 1) == pytest.approx(float(oracle), abs=1e-15)
    assert float(oracle) == 0.1


def test_joint_inclusion_diagonal_and_cross_strata():
    frame = PopulationFrame({"y": np.zeros(10)}, {"y": "outcome"})
    included = np.zeros(10, dtype=bool)
    included[:3] = True  # pi = 0.3
    design = attach_design(frame, np.zeros(10, int), included)
    assert design.joint_inclusion(0, 0) == pytest.approx(0.3)

    strata2 = np.repeat([0, 1], [10, 4])
    included2 = np.zeros(14, dtype=bool)
    included2[:2] = True      # pi = 0.2
    included2[10:12] = True   # pi = 0.5
    frame2 = PopulationFrame({"y": np.zeros(14)}, {"y": "outcome"})
    design2 = attach_design(frame2, strata2, included2)
    assert design2.joint_inclusion(0, 10) == pytest.approx(0.1)
    # delta is zero across strata, nonpositive within
    assert design2.delta(0, 10) == pytest.approx(0.0)
    assert design2.delta(0, 1) <= 0.0


def test_joint_inclusion_requires_included_rows():
    frame = PopulationFrame({"y": np.zeros(4)}, {"y": "outcome"})
    design = attach_design(frame, np.zeros(4, int), [True, True, False, False])
    with pytest.raises(DesignError):
        design.joint_inclusion(0, 3)


def test_horvitz_thompson_reproduces_stratum_counts():
    rng = np.random.default_rng(3)
    strata = rng.integers(0, 4, size=200)
    included = np.zeros(200, dtype=bool)
    for h in range(4):
        idx = np.flatnonzero(strata == h)
        included[rng.choice(idx, size=max(1, idx.size // 3), replace=False)] = True
    frame = PopulationFrame({"y": np.zeros(200)}, {"y": "outcome"})
    design = attach_design(frame, strata, included)
    for h in range(4):
        in_h = strata == h
        ht = np.sum(design.design_weights[in_h & included])
        assert ht == pytest.approx(in_h.sum(), rel=1e-12)


def test_monte_carlo_co_inclusion_frequency():
    # 10,000 stratified draws; pair frequency within 3 binomial SEs of pi_ij
    rng = np.random.default_rng(42)
    N_h, n_h = 12, 4
    p_pair = n_h * (n_h - 1) / (N_h * (N_h - 1))
    draws = 10_000
    hits = 0
    units = np.arange(N_h)
    for _ in range(draws):
        sample = rng.choice(units, size=n_h, replace=False)
        if 0 in sample and 1 in sample:
            hits += 1
    se = np.sqrt(p_pair * (1 - p_pair) / draws)
    assert abs(hits / draws - p_pair) < 3 * se


def test_phase1_columns_must_be_complete():
    with pytest.raises(FrameError):
        PopulationFrame({"y": [1.0, np.nan]}, {"y": "outcome"})
    # phase-2 columns may hold missing markers
    frame = PopulationFrame({"y": [1.0, 2.0], "x": [np.nan, 1.0]},
                            {"y": "outcome", "x": "phase2"})
    assert np.isnan(frame.column("x")[0])


def test_missing_phase2_on_sampled_row_rejected():
    frame = PopulationFrame({"y": [1.0, 2.0], "x": [np.nan, 1.0]},
                            {"y": "outcome", "x": "phase2"})
    with pytest.raises(FrameError):
        attach_design(frame, [0, 0], [True, True])
    design = attach_design(frame, [0, 0], [False, True])
    assert design.n_included == 1


def test_masked_to_design_blanks_unsampled_rows():
    frame = PopulationFrame({"y": [1.0, 2.0, 3.0], "x": [1.0, 2.0, 3.0]},
                            {"y": "outcome", "x": "phase2"})
    design = attach_design(frame, [0, 0, 0], [True, False, True])
    masked = frame.masked_to_design(design)
    assert np.isnan(masked.column("x")[1])
    assert masked.column("x")[0] == 1.0
    # arithmetic on the masked row fails loudly (NaN propagates)
    assert np.isnan(masked.column("x").sum())


def test_frame_immutability():
    frame = PopulationFrame({"y": [1.0, 2.0]}, {"y": "outcome"})
    with pytest.raises(ValueError):
        frame.column("y")[0] = 9.0


def test_modelspec_validation():
    frame = PopulationFrame({"y": [0.0, 1.0, 2.0], "x": [1.0, 2.0, 3.0]},
                            {"y": "outcome", "x": "phase2"})
    ModelSpec("gaussian", "y", ("x",)).validate(frame)
    with pytest.raises(FrameError):
        ModelSpec("binomial", "y", ("x",)).validate(frame)
    with pytest.raises(FrameError):
        ModelSpec("gaussian", "y", ("missing",)).validate(frame)
    with pytest.raises(FrameError):
        ModelSpec("poisson", "y", ("x",))


def test_design_vector_length_checks():
    frame = PopulationFrame({"y": [1.0, 2.0]}, {"y": "outcome"})
    with pytest.raises(DesignError):
        attach_design(frame, [0], [True])
    with pytest.raises(DesignError):
        attach_design(frame, [0, 0], [False, False])


def test_csv_roundtrip(tmp_path):
    csv_path = tmp_path / "data.csv"
    meta_path = tmp_path / "meta.yaml"
    csv_path.write_text(
        "y,x,z,stratum,sampled\n"
        "1.0,2.5,0.1,0,1\n"
        "0.0,,0.2,0,0\n"
        "1.0,1.5,0.3,1,1\n"
        "0.0,,0.4,1,0\n"
        "1.0,3.5,0.5,1,1\n"
    )
    meta_path.write_text(
        "columns:\n  y: outcome\n  x: phase2\n  z: phase1\n"
        "stratum: stratum\nincluded: sampled\n"
    )
    frame, design = read_frame_csv(csv_path, meta_path)
    assert frame.n_rows == 5
    assert design.n_included == 3
    assert np.isnan(frame.column("x")[1])
    assert design.stratum_counts[0] == (2, 1)
    assert design.stratum_counts[1] == (3, 2)


def test_csv_parse_error_reports_line(tmp_path):
    csv_path = tmp_path / "data.csv"
    meta_path = tmp_path / "meta.yaml"
    csv_path.write_text("y,stratum,sampled\n1.0,0,1\noops,0,1\n")
    meta_path.write_text("columns:\n  y: outcome\nstratum: stratum\nincluded: sampled\n")
    with pytest.raises(FrameError, match=":3:"):
        read_frame_csv(csv_path, meta_path)
