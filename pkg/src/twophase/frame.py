"""Phase-1 data frames, two-phase designs, and model specifications.

A two-phase sample is a full cohort (phase 1) on which the outcome and cheap
covariates are observed for everyone, plus a stratified probability subsample
(phase 2) on which the expensive covariates are observed.  This module holds
the rectangular phase-1 data, the phase-2 inclusion bookkeeping (inclusion
probabilities, joint inclusion probabilities, design weights), and the model
specification that downstream fitting consumes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import yaml

COLUMN_ROLES = ("outcome", "phase1", "phase2", "auxiliary")


class FrameError(ValueError):
    """Invalid frame contents or metadata."""


class DesignError(ValueError):
    """Inconsistent phase-2 design specification."""


class PopulationFrame:
    """Rectangular phase-1 data: one row per cohort member.

    Parameters
    ----------
    columns : dict
        Column name -> 1-d array of values.  Phase-2 columns may contain
        NaN as the missing marker on rows outside the phase-2 sample;
        all other roles must be fully observed.
    roles : dict
        Column name -> one of ``outcome``, ``phase1``, ``phase2``,
        ``auxiliary``.
    row_id : array, optional
        Stable integer identifier per row; defaults to 0..N-1.

    The frame is immutable after construction and safe to share across
    parallel workers.
    """

    def __init__(self, columns, roles, row_id=None):
        if not columns:
            raise FrameError("frame needs at least one column")
        self._data = {}
        lengths = set()
        for name, values in columns.items():
            arr = np.asarray(values, dtype=float).copy()
            if arr.ndim != 1:
                raise FrameError(f"column {name!r} is not 1-dimensional")
            arr.flags.writeable = False
            self._data[name] = arr
            lengths.add(arr.shape[0])
        if len(lengths) != 1:
            raise FrameError(f"columns have unequal lengths: {sorted(lengths)}")
        self.n_rows = lengths.pop()
        if self.n_rows < 1:
            raise FrameError("frame must have at least one row")

        self.roles = dict(roles)
        for name in self._data:
            role = self.roles.get(name)
            if role not in COLUMN_ROLES:
                raise FrameError(f"column {name!r} has invalid role {role!r}")
            if role != "phase2" and not np.all(np.isfinite(self._data[name])):
                raise FrameError(f"phase-1 column {name!r} contains missing values")

        if row_id is None:
            row_id = np.arange(self.n_rows)
        self.row_id = np.asarray(row_id, dtype=int).copy()
        if self.row_id.shape != (self.n_rows,):
            raise FrameError("row_id length does not match frame")
        self.row_id.flags.writeable = False

    @property
    def names(self):
        return list(self._data)

    def column(self, name):
        """Return the (read-only) values of one column."""
        try:
            return self._data[name]
        except KeyError:
            raise FrameError(f"no column named {name!r}") from None

    def matrix(self, names):
        """Stack the named columns into an (N, k) array."""
        return np.column_stack([self.column(n) for n in names])

    def role_of(self, name):
        self.column(name)
        return self.roles[name]

    def columns_with_role(self, role):
        return [n for n in self._data if self.roles[n] == role]

    def with_columns(self, replacements):
        """New frame with some columns replaced (roles unchanged)."""
        cols = {n: (replacements[n] if n in replacements else v)
                for n, v in self._data.items()}
        return PopulationFrame(cols, self.roles, self.row_id)

    def masked_to_design(self, design):
        """Copy with phase-2 columns set to NaN outside the phase-2 sample.

        Keeps accidental arithmetic on unsampled rows from silently using
        values an analyst would not have.
        """
        out = ~np.asarray(design.included)
        repl = {}
        for name in self.columns_with_role("phase2"):
            vals = self._data[name].copy()
            vals[out] = np.nan
            repl[name] = vals
        return self.with_columns(repl)

    def check_design_missingness(self, design):
        """Raise if a phase-2 column is missing on a sampled row."""
        incl = np.asarray(design.included)
        for name in self.columns_with_role("phase2"):
            bad = incl & ~np.isfinite(self._data[name])
            if np.any(bad):
                raise FrameError(
                    f"phase-2 column {name!r} missing on {int(bad.sum())} sampled rows"
                )


@dataclass(frozen=True)
class ModelSpec:
    """Outcome model: family, outcome column, regressors (intercept implicit).

    ``family`` is ``gaussian`` (identity link) or ``binomial`` (logit link).
    The design matrix downstream is ``[1, regressor_columns...]`` in order.
    """

    family: str
    outcome_column: str
    regressor_columns: tuple
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "binomial"):
            raise FrameError(f"unknown family {self.family!r}")
        object.__setattr__(self, "regressor_columns", tuple(self.regressor_columns))

    @property
    def coef_names(self):
        return ("intercept",) + self.regressor_columns

    @property
    def n_coef(self):
        return 1 + len(self.regressor_columns)

    def validate(self, frame):
        """Check the spec against a frame; returns the frame for chaining."""
        y = frame.column(self.outcome_column)
        for name in self.regressor_columns:
            frame.column(name)
        if self.family == "binomial":
            ok = np.isin(y[np.isfinite(y)], (0.0, 1.0))
            if not np.all(ok):
                raise FrameError("binomial outcome must be coded 0/1")
        if self.offset is not None and len(self.offset) != frame.n_rows:
            raise FrameError("offset length does not match frame")
        return frame

    def phase2_regressors(self, frame):
        return [c for c in self.regressor_columns if frame.role_of(c) == "phase2"]

    def phase1_regressors(self, frame):
        return [c for c in self.regressor_columns if frame.role_of(c) != "phase2"]


class TwoPhaseDesign:
    """Stratified SRS-without-replacement phase-2 design.

    Holds the stratum labels, inclusion indicators R_i, inclusion
    probabilities pi_i = n_h/N_h, and design weights d_i = 1/pi_i (defined
    on sampled rows, NaN elsewhere).  Immutable after construction.
    """

    def __init__(self, stratum_of, included):
        stratum_of = np.asarray(stratum_of)
        included = np.asarray(included, dtype=bool)
        if stratum_of.shape != included.shape or stratum_of.ndim != 1:
            raise DesignError("stratum_of and included must be equal-length vectors")
        n_rows = stratum_of.shape[0]
        if not np.any(included):
            raise DesignError("no phase-2 units included")

        labels, codes = np.unique(stratum_of, return_inverse=True)
        pop_counts = np.bincount(codes, minlength=len(labels))
        samp_counts = np.bincount(codes[included], minlength=len(labels))

        pi = samp_counts[codes] / pop_counts[codes]
        if np.any(pi[included] <= 0):
            raise DesignError("included unit in a stratum with zero sample count")

        weights = np.full(n_rows, np.nan)
        weights[included] = 1.0 / pi[included]

        self.n_rows = n_rows
        self.stratum_of = stratum_of.copy()
        self.included = included.copy()
        self.pi = pi
        self.design_weights = weights
        self.stratum_labels = labels
        self._codes = codes
        # per-stratum (N_h, n_h)
        self.stratum_counts = {
            label: (int(pop_counts[k]), int(samp_counts[k]))
            for k, label in enumerate(labels)
        }
        for arr in (self.stratum_of, self.included, self.pi,
                    self.design_weights, self._codes):
            arr.flags.writeable = False

    @property
    def n_included(self):
        return int(self.included.sum())

    def joint_inclusion(self, i, j):
        """P(both i and j sampled) under stratified SRS without replacement.

        Equals pi_i when i == j, pi_i * pi_j across strata, and
        n_h(n_h-1) / (N_h(N_h-1)) for distinct units sharing stratum h.
        """
        if not (self.included[i] and self.included[j]):
            raise DesignError("joint_inclusion requires both rows to be included")
        if i == j:
            return float(self.pi[i])
        if self._codes[i] != self._codes[j]:
            return float(self.pi[i] * self.pi[j])
        N_h, n_h = self.stratum_counts[self.stratum_labels[self._codes[i]]]
        if N_h < 2:
            raise DesignError("joint inclusion undefined in a singleton stratum")
        return n_h * (n_h - 1) / (N_h * (N_h - 1))

    def delta(self, i, j):
        """Sampling-indicator covariance Delta_ij = pi_ij - pi_i pi_j."""
        return self.joint_inclusion(i, j) - float(self.pi[i] * self.pi[j])

    def stratum_arrays(self):
        """(codes, pop_counts, samp_counts) aligned to stratum_labels."""
        pop = np.array([self.stratum_counts[lab][0] for lab in self.stratum_labels])
        samp = np.array([self.stratum_counts[lab][1] for lab in self.stratum_labels])
        return self._codes, pop, samp


def attach_design(frame, stratum_of, included):
    """Build a TwoPhaseDesign for ``frame`` and validate it against the data.

    Inclusion probabilities are n_h/N_h per stratum; design weights are
    populated on included rows.  Raises DesignError for length mismatches,
    FrameError if a phase-2 column is missing on a sampled row.
    """
    stratum_of = np.asarray(stratum_of)
    included = np.asarray(included, dtype=bool)
    if stratum_of.shape[0] != frame.n_rows or included.shape[0] != frame.n_rows:
        raise DesignError("design vectors must have one entry per frame row")
    design = TwoPhaseDesign(stratum_of, included)
    frame.check_design_missingness(design)
    return design


def _parse_float(text):
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return np.nan
    return float(text)


def read_frame_csv(csv_path, meta_path):
    """Read a data CSV plus its metadata side-file.

    The CSV must have a header row.  The metadata file (YAML) declares
    column roles and the design columns::

        columns:
          y: outcome
          z: phase1
          x: phase2
          a: auxiliary
        stratum: stratum        # column holding stratum labels
        included: sampled       # column holding 0/1 inclusion flags

    Returns ``(frame, design)``.  Columns not named in the metadata are
    ignored.  Parse failures report the offending line number.
    """
    with open(meta_path) as fh:
        meta = yaml.safe_load(fh)
    if not isinstance(meta, dict) or "columns" not in meta:
        raise FrameError(f"{meta_path}: metadata must map 'columns' to column roles")
    role_map = dict(meta["columns"])
    stratum_col = meta.get("stratum")
    included_col = meta.get("included")
    if stratum_col is None or included_col is None:
        raise FrameError(f"{meta_path}: metadata must name 'stratum' and 'included' columns")

    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FrameError(f"{csv_path}: empty file") from None
        header = [h.strip() for h in header]
        wanted = set(role_map) | {stratum_col, included_col}
        missing = wanted - set(header)
        if missing:
            raise FrameError(f"{csv_path}: missing columns {sorted(missing)}")
        idx = {name: header.index(name) for name in wanted}

        values = {name: [] for name in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FrameError(f"{csv_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for name, k in idx.items():
                try:
                    values[name].append(_parse_float(row[k]))
                except ValueError:
                    raise FrameError(
                        f"{csv_path}:{lineno}: cannot parse {name}={row[k]!r} as a number"
                    ) from None

    columns = {name: values[name] for name in role_map}
    frame = PopulationFrame(columns, role_map)
    stratum_of = np.asarray(values[stratum_col])
    if not np.all(np.isfinite(stratum_of)):
        raise FrameError(f"{csv_path}: stratum column contains missing values")
    included = np.asarray(values[included_col])
    if not np.all(np.isin(included[np.isfinite(included)], (0.0, 1.0))):
        raise FrameError(f"{csv_path}: inclusion column must be 0/1")
    design = attach_design(frame, stratum_of.astype(int), included.astype(bool))
    return frame, design
