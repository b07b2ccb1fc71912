"""Seeded Monte Carlo laboratory for the published simulation designs.

Each scenario bundles a population generator, a phase-2 allocation rule,
and the model to fit.  Replicates are deterministic functions of
(base_seed, replicate_index) through independent named substreams, so any
parallel schedule reproduces the serial results bit for bit.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy.special import expit

from .estimators import EstimatorOptions, estimate_suite
from .frame import PopulationFrame, attach_design
from .frame import ModelSpec

SCENARIO_IDS = (
    "cc_normal", "cc_uniform", "cc_confounded",
    "tp_homoscedastic", "tp_heteroscedastic", "tp_binary",
    "tp_AZ_balanced", "tp_AZ_optimal", "tp_Z_optimal",
)

_STREAM_POPULATION = 11
_STREAM_SAMPLING = 13

MAX_REGENERATIONS = 25
FAILURE_FRACTION_LIMIT = 0.01


class SimulationError(RuntimeError):
    pass


class AllocationError(SimulationError):
    pass


class ScenarioFailure(SimulationError):
    """Raised when more than 1% of replicates failed; carries the summary."""

    def __init__(self, message, summary=None):
        super().__init__(message)
        self.summary = summary


class _RetryReplicate(Exception):
    """Internal: the drawn population cannot support the design (no cases)."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    population_size: int
    phase2_size: int | None
    beta0: float
    beta_x: float
    beta_z: float | None
    sigma2: float | None
    delta: float | None
    allocation: str
    strata_rule: tuple
    replicates: int
    base_seed: int
    target_coefficient: str = "x"

    def to_dict(self):
        d = asdict(self)
        d["strata_rule"] = [[col, list(qs)] for col, qs in self.strata_rule]
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["strata_rule"] = tuple(
            (col, tuple(qs)) for col, qs in d.get("strata_rule", ())
        )
        return ScenarioConfig(**d)


_DEFAULTS = {
    "cc_normal": dict(population_size=10000, phase2_size=None, beta0=-4.0,
                      beta_x=1.0, beta_z=None, sigma2=None, delta=None,
                      allocation="case_control_1to1", strata_rule=()),
    "cc_uniform": dict(population_size=10000, phase2_size=None, beta0=-4.0,
                       beta_x=1.0, beta_z=None, sigma2=None, delta=None,
                       allocation="case_control_1to1", strata_rule=()),
    "cc_confounded": dict(population_size=10000, phase2_size=None, beta0=-4.0,
                          beta_x=0.5, beta_z=0.5, sigma2=None, delta=None,
                          allocation="case_control_1to1", strata_rule=()),
    "tp_homoscedastic": dict(population_size=6000, phase2_size=600, beta0=0.0,
                             beta_x=1.0, beta_z=1.0, sigma2=1.0, delta=None,
                             allocation="balanced",
                             strata_rule=(("z", (0.9,)),)),
    "tp_Z_optimal": dict(population_size=6000, phase2_size=600, beta0=0.0,
                         beta_x=1.0, beta_z=1.0, sigma2=1.0, delta=None,
                         allocation="neyman_optimal",
                         strata_rule=(("z", (0.9,)),)),
    "tp_heteroscedastic": dict(population_size=6000, phase2_size=600, beta0=0.0,
                               beta_x=1.0, beta_z=1.0, sigma2=None, delta=0.5,
                               allocation="neyman_optimal",
                               strata_rule=(("a", (0.25, 0.75)), ("z", (0.6,)))),
    "tp_AZ_balanced": dict(population_size=6000, phase2_size=600, beta0=0.0,
                           beta_x=0.5, beta_z=0.5, sigma2=1.0, delta=None,
                           allocation="balanced",
                           strata_rule=(("a", (0.3, 0.7)), ("z", ()))),
    "tp_AZ_optimal": dict(population_size=6000, phase2_size=600, beta0=0.0,
                          beta_x=0.5, beta_z=0.5, sigma2=1.0, delta=None,
                          allocation="neyman_optimal",
                          strata_rule=(("a", (0.3, 0.7)), ("z", ()))),
    "tp_binary": dict(population_size=10000, phase2_size=2000, beta0=-4.0,
                      beta_x=1.0, beta_z=1.0, sigma2=None, delta=None,
                      allocation="neyman_optimal",
                      strata_rule=(("a", (0.3, 0.7)), ("z", (0.6,)))),
}


def scenario_config(scenario_id, replicates=1000, base_seed=20250701, **overrides):
    """A ScenarioConfig with the published defaults for ``scenario_id``."""
    if scenario_id not in _DEFAULTS:
        raise SimulationError(f"unknown scenario {scenario_id!r}")
    params = dict(_DEFAULTS[scenario_id])
    params.update(overrides)
    return ScenarioConfig(scenario_id=scenario_id, replicates=replicates,
                          base_seed=base_seed, **params)


def model_spec(config):
    binomial = config.scenario_id in ("cc_normal", "cc_uniform",
                                      "cc_confounded", "tp_binary")
    family = "binomial" if binomial else "gaussian"
    regressors = ("x",) if config.beta_z is None else ("x", "z")
    return ModelSpec(family, "y", regressors)


def true_beta(config):
    if config.beta_z is None:
        return np.array([config.beta0, config.beta_x])
    return np.array([config.beta0, config.beta_x, config.beta_z])


def default_estimators(config):
    if config.scenario_id in ("cc_normal", "cc_uniform"):
        return ("mle_cc", "stab_xz", "ipw")
    if config.scenario_id == "tp_binary":
        return ("ipw", "stab_z", "stab_rake", "gr")
    return ("ipw", "stab_xz", "stab_z", "stab_rake", "gr")


def _rng(config, replicate_index, stream, attempt=0):
    seq = np.random.SeedSequence(
        [int(config.base_seed), int(replicate_index), int(stream), int(attempt)])
    return np.random.default_rng(seq)


def generate_population(config, replicate_index, attempt=0):
    """Draw one population frame; deterministic in (seed, index, attempt)."""
    rng = _rng(config, replicate_index, _STREAM_POPULATION, attempt)
    sid = config.scenario_id
    N = config.population_size

    if sid in ("cc_normal", "cc_uniform"):
        x = rng.standard_normal(N) if sid == "cc_normal" else rng.uniform(0.0, 1.0, N)
        y = rng.binomial(1, expit(config.beta0 + config.beta_x * x)).astype(float)
        return PopulationFrame({"y": y, "x": x},
                               {"y": "outcome", "x": "phase2"})

    if sid == "cc_confounded":
        z = rng.standard_normal(N)
        x = 0.8 * z + rng.standard_normal(N)
        eta = config.beta0 + config.beta_x * x + config.beta_z * z
        y = rng.binomial(1, expit(eta)).astype(float)
        return PopulationFrame({"y": y, "x": x, "z": z},
                               {"y": "outcome", "x": "phase2", "z": "phase1"})

    w1 = rng.standard_normal(N)
    w2 = rng.binomial(1, 0.6, N).astype(float)

    if sid in ("tp_AZ_balanced", "tp_AZ_optimal"):
        z = rng.binomial(1, expit(0.3 + w1 + w2)).astype(float)
        x = w1 + 0.8 * w2 + z + rng.standard_normal(N)
    else:
        x = 0.3 + w1 + w2 + rng.standard_normal(N)
        z = w1 + 0.8 * w2 + rng.standard_normal(N)
    a = x + rng.standard_normal(N)

    if sid == "tp_binary":
        eta = config.beta0 + config.beta_x * x + config.beta_z * z
        y = rng.binomial(1, expit(eta)).astype(float)
    elif sid == "tp_heteroscedastic":
        sd = np.sqrt(1.0 + config.delta * z**2)
        y = config.beta_x * x + config.beta_z * z + sd * rng.standard_normal(N)
    else:
        y = (config.beta_x * x + config.beta_z * z
             + np.sqrt(config.sigma2) * rng.standard_normal(N))

    return PopulationFrame(
        {"y": y, "x": x, "z": z, "a": a},
        {"y": "outcome", "x": "phase2", "z": "phase1", "a": "auxiliary"})


def _strata_labels(frame, strata_rule):
    """Cross-classified stratum codes from per-column quantile cuts.

    An empty cut tuple means the column is categorical and grouped by its
    exact values.
    """
    if not strata_rule:
        return np.zeros(frame.n_rows, dtype=int)
    codes = np.zeros(frame.n_rows, dtype=int)
    for col, qs in strata_rule:
        values = frame.column(col)
        if len(qs) == 0:
            _, part = np.unique(values, return_inverse=True)
            n_levels = part.max() + 1
        else:
            cuts = np.quantile(values, qs)
            part = np.searchsorted(cuts, values, side="left")
            n_levels = len(qs) + 1
        codes = codes * n_levels + part
    _, codes = np.unique(codes, return_inverse=True)
    return codes


def _allocate(weights, pop_counts, total, floor=2):
    """Integer stratum sample sizes: n_h proportional to ``weights``,
    floored, capped at N_h, summing exactly to ``total``."""
    weights = np.asarray(weights, dtype=float)
    pop_counts = np.asarray(pop_counts, dtype=int)
    H = weights.shape[0]
    if np.any(pop_counts < 2):
        raise AllocationError("stratum with fewer than 2 population units")
    floors = np.minimum(floor, pop_counts)
    caps = pop_counts.astype(float)
    if total > pop_counts.sum():
        raise AllocationError("phase-2 size exceeds the population")
    if total < floors.sum():
        raise AllocationError("phase-2 size below the per-stratum floor")

    alloc = np.zeros(H)
    fixed = np.zeros(H, dtype=bool)
    for _ in range(2 * H + 2):
        free = ~fixed
        budget = total - alloc[fixed].sum()
        w_free = weights[free]
        if w_free.sum() <= 0:
            alloc[free] = budget / free.sum()
        else:
            alloc[free] = budget * w_free / w_free.sum()
        low = free & (alloc < floors)
        high = free & (alloc > caps)
        if not (low.any() or high.any()):
            break
        alloc[low] = floors[low]
        alloc[high] = caps[high]
        fixed |= low | high
    base = np.floor(alloc).astype(int)
    base = np.maximum(base, floors.astype(int))
    base = np.minimum(base, pop_counts)
    deficit = int(total - base.sum())
    if deficit < 0:
        order = np.argsort(-(base - floors))
        for k in order:
            take = min(-deficit, base[k] - floors[k])
            base[k] -= take
            deficit += take
            if deficit == 0:
                break
    elif deficit > 0:
        remainder = alloc - np.floor(alloc)
        order = np.argsort(-remainder, kind="stable")
        for k in order:
            if deficit == 0:
                break
            if base[k] < pop_counts[k]:
                base[k] += 1
                deficit -= 1
        while deficit > 0:  # remaining capacity anywhere
            for k in range(H):
                if deficit and base[k] < pop_counts[k]:
                    base[k] += 1
                    deficit -= 1
            if not any(base < pop_counts):
                break
    if base.sum() != total:
        raise AllocationError("allocation could not match the phase-2 size")
    return base


def _neyman_weights(frame, config):
    """N_h * S_h with S_h the stratum SD of the target full-data influence."""
    spec = model_spec(config)
    fit_all = _full_data_fit(frame, spec)
    idx = spec.coef_names.index(config.target_coefficient)
    return fit_all.influence[:, idx]


def _full_data_fit(frame, spec):
    from .glm import fit_weighted_glm

    return fit_weighted_glm(frame, spec, np.ones(frame.n_rows))


def draw_phase2(frame, config, replicate_index, attempt=0):
    """Draw the phase-2 sample; deterministic given (seed, index, attempt).

    Allocations: ``case_control_1to1`` takes every case plus an equal-sized
    SRS of controls; ``balanced`` splits the phase-2 size equally across
    strata (excess over a stratum's size redistributed proportionally);
    ``neyman_optimal`` allocates proportionally to N_h times the stratum SD
    of the full-data influence function of the target coefficient (an
    oracle allocation available only inside the simulator), floored at two
    units per stratum.
    """
    rng = _rng(config, replicate_index, _STREAM_SAMPLING, attempt)

    if config.allocation == "case_control_1to1":
        y = frame.column("y")
        cases = np.flatnonzero(y == 1)
        controls = np.flatnonzero(y == 0)
        if cases.size == 0 or controls.size < cases.size:
            raise _RetryReplicate
        chosen = rng.choice(controls, size=cases.size, replace=False)
        included = np.zeros(frame.n_rows, dtype=bool)
        included[cases] = True
        included[chosen] = True
        return attach_design(frame, y.astype(int), included)

    codes = _strata_labels(frame, config.strata_rule)
    H = codes.max() + 1
    pop_counts = np.bincount(codes, minlength=H)
    if config.allocation == "balanced":
        weights = np.ones(H)
    elif config.allocation == "neyman_optimal":
        influence = _neyman_weights(frame, config)
        sds = np.array([np.std(influence[codes == h], ddof=1) for h in range(H)])
        weights = pop_counts * sds
    else:
        raise SimulationError(f"unknown allocation {config.allocation!r}")

    sizes = _allocate(weights, pop_counts, config.phase2_size)
    included = np.zeros(frame.n_rows, dtype=bool)
    for h in range(H):
        idx = np.flatnonzero(codes == h)
        if sizes[h] >= idx.size:
            included[idx] = True
        else:
            included[rng.choice(idx, size=sizes[h], replace=False)] = True
    return attach_design(frame, codes, included)


def _replicate_task(payload):
    config, kinds, options, r = payload
    attempt = 0
    while True:
        frame = generate_population(config, r, attempt)
        try:
            design = draw_phase2(frame, config, r, attempt)
            break
        except _RetryReplicate:
            attempt += 1
            if attempt > MAX_REGENERATIONS:
                return r, {k: ("error", "no usable replicate draw") for k in kinds}, 0, attempt
    analysis = frame.masked_to_design(design)
    spec = model_spec(config)
    reports = estimate_suite(analysis, design, spec, kinds, options,
                             on_error="capture")
    out = {}
    for kind in kinds:
        rep = reports[kind]
        if isinstance(rep, Exception):
            out[kind] = ("error", f"{type(rep).__name__}: {rep}")
        else:
            out[kind] = ("ok", rep.beta, rep.se)
    return r, out, design.n_included, attempt


@dataclass
class SimulationSummary:
    """Per estimator x coefficient performance over the seeded replicates."""

    config: ScenarioConfig
    estimators: tuple
    coef_names: tuple
    true_beta: np.ndarray
    bias: dict
    empse: dict
    rmse: dict
    mean_se: dict
    n_ok: dict
    failures: dict
    failure_messages: dict
    mean_phase2_size: float
    regenerated: int
    estimates: dict | None = None
    reported_se: dict | None = None

    def cell(self, estimator, coefficient):
        """(bias, empSE, RMSE, mean reported SE) for one cell."""
        k = self.coef_names.index(coefficient)
        return (self.bias[estimator][k], self.empse[estimator][k],
                self.rmse[estimator][k], self.mean_se[estimator][k])

    def to_rows(self):
        rows = []
        for est in self.estimators:
            for k, name in enumerate(self.coef_names):
                rows.append({
                    "estimator": est,
                    "coefficient": name,
                    "true_value": float(self.true_beta[k]),
                    "bias": float(self.bias[est][k]),
                    "empse": float(self.empse[est][k]),
                    "rmse": float(self.rmse[est][k]),
                    "mean_se": float(self.mean_se[est][k]),
                    "replicates_ok": int(self.n_ok[est]),
                    "failures": int(self.failures[est]),
                })
        return rows


def run_scenario(config, estimators=None, options=None, parallel=1,
                 keep_estimates=False):
    """Run every replicate of a scenario and aggregate the results.

    Deterministic given ``config.base_seed`` regardless of ``parallel``.
    Per-replicate estimator failures are captured and excluded; the
    scenario raises ScenarioFailure when any estimator fails on more than
    1% of replicates.
    """
    estimators = tuple(estimators or default_estimators(config))
    options = options or EstimatorOptions()
    spec = model_spec(config)
    coef_names = spec.coef_names
    p = len(coef_names)
    R = config.replicates

    betas = {k: np.full((R, p), np.nan) for k in estimators}
    ses = {k: np.full((R, p), np.nan) for k in estimators}
    messages = {k: [] for k in estimators}
    phase2_sizes = np.zeros(R)
    regenerated = 0

    payloads = [(config, estimators, options, r) for r in range(R)]
    if parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_replicate_task, payloads,
                                    chunksize=max(1, R // (4 * parallel))))
    else:
        results = [_replicate_task(pl) for pl in payloads]

    for r, out, n_incl, attempts in results:
        phase2_sizes[r] = n_incl
        regenerated += attempts
        for kind in estimators:
            status = out[kind]
            if status[0] == "ok":
                betas[kind][r] = status[1]
                ses[kind][r] = status[2]
            elif len(messages[kind]) < 10:
                messages[kind].append(f"replicate {r}: {status[1]}")

    truth = true_beta(config)
    bias, empse, rmse, mean_se, n_ok, failures = {}, {}, {}, {}, {}, {}
    for kind in estimators:
        ok = np.all(np.isfinite(betas[kind]), axis=1)
        n = int(ok.sum())
        n_ok[kind] = n
        failures[kind] = R - n
        est = betas[kind][ok]
        if n == 0:
            bias[kind] = np.full(p, np.nan)
            empse[kind] = np.full(p, np.nan)
            rmse[kind] = np.full(p, np.nan)
            mean_se[kind] = np.full(p, np.nan)
            continue
        bias[kind] = est.mean(axis=0) - truth
        empse[kind] = est.std(axis=0, ddof=1) if n > 1 else np.full(p, np.nan)
        rmse[kind] = np.sqrt(np.mean((est - truth) ** 2, axis=0))
        mean_se[kind] = ses[kind][ok].mean(axis=0)

    summary = SimulationSummary(
        config=config, estimators=estimators, coef_names=coef_names,
        true_beta=truth, bias=bias, empse=empse, rmse=rmse, mean_se=mean_se,
        n_ok=n_ok, failures=failures, failure_messages=messages,
        mean_phase2_size=float(phase2_sizes.mean()), regenerated=regenerated,
        estimates=({k: betas[k] for k in estimators} if keep_estimates else None),
        reported_se=({k: ses[k] for k in estimators} if keep_estimates else None),
    )
    worst = max(failures.values()) if failures else 0
    if worst > FAILURE_FRACTION_LIMIT * R:
        raise ScenarioFailure(
            f"{worst} of {R} replicates failed (> {FAILURE_FRACTION_LIMIT:.0%}); "
            f"first messages: {[m for ms in messages.values() for m in ms][:3]}",
            summary=summary)
    return summary
