"""Monte Carlo studies: design specifications, data generators, and the
replicate harness that aggregates bias/ASE/MAD/coverage/efficiency metrics.

Three generator families:
  * simple random samples with a gamma or normal covariate,
  * a stratified three-stage survey (strata, block groups, households) with
    exact inclusion probabilities and weight = 1/pi,
  * a large-cohort design with grouped demographics, an error-prone exposure,
    and a biomarker calibration subset.

Event times are exponential with rate lambda_b * exp(x'beta), discretized to
the visit grid (interval j means tau_{j-1} < T <= tau_j). Auxiliary reports
corrupt the per-visit true status independently with the given Se/Sp and are
truncated after the first positive; the gold standard is read at one common
visit and set missing with probability mr.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .calibration import fit_calibration, mi_variance
from .comparator import fit_cloglog, fit_standard, relative_efficiency
from .data_model import Dataset, MisclassSpec, SubjectRecord, VisitSchedule
from .errors import ConfigError
from .estimation import FitOptions, SurveyDesign, fit
from .likelihood import pack_dataset

__all__ = [
    "SimDesign",
    "CalibrationSubset",
    "HchsSample",
    "ReplicateRecord",
    "StudySummary",
    "bundled_design",
    "bundled_design_names",
    "generate_srs",
    "generate_survey",
    "generate_hchs_like",
    "run_study",
    "censoring_rate",
    "write_summary_csv",
]

_Z95 = 1.96

# stratum-level gamma (shape, scale) pairs for the survey designs
DEFAULT_STRATUM_GAMMA = ((0.25, 1.25), (0.15, 0.75), (0.30, 1.50), (0.10, 0.50))
DEFAULT_STRATUM_NORMAL = ((0.3125, 1.0), (0.1125, 1.0), (0.45, 1.0), (0.05, 1.0))

_SURVEY_KEYS = {
    "superpopulation", "stratum_shares", "bg_per_stratum", "bg_sampled",
    "household_size_probs", "bg_perturbation",
}
_ERROR_MODEL_KEYS = {"alpha", "sigma2_e", "sigma2_eps", "n_c", "m_imputations", "method"}
_LAW_KINDS = {"gamma", "normal", "stratified_gamma", "stratified_normal", "hchs"}

# grouped-demographics constants for the large-cohort generator: two sex
# groups, three background groups, trivariate normal (X, Z1, Z2) within cell
_HCHS_SEX_P = (0.48, 0.52)
_HCHS_BACKGROUND_P = (0.12, 0.36, 0.52)
_HCHS_BASE_MEAN = (0.5, 0.0, 0.0)
_HCHS_SEX_SHIFT = (0.0, 0.10)
_HCHS_BACKGROUND_SHIFT = (-0.15, 0.0, 0.10)
_HCHS_WITHIN_COV = (
    (0.25, 0.10, -0.05),
    (0.10, 1.0, 0.15),
    (-0.05, 0.15, 1.0),
)


@dataclass(frozen=True)
class SimDesign:
    """One simulation configuration; JSON round-trippable."""

    n_target: int
    j_visits: int
    gs_visit: int
    beta: tuple[float, ...]
    lambda_b: float
    covariate_law: dict
    sensitivity: float
    specificity: float
    mr: float
    replicates: int
    seed: int
    aux_missing_rate: float = 0.0
    survey: dict | None = None
    error_model: dict | None = None
    monotone_dropout: bool = False
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.lambda_b <= 0:
            raise ConfigError("lambda_b must be positive")
        if not 0 <= self.mr < 1:
            raise ConfigError("mr must lie in [0, 1)")
        if not 0 <= self.aux_missing_rate < 1:
            raise ConfigError("aux_missing_rate must lie in [0, 1)")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not 1 <= self.gs_visit <= self.j_visits:
            raise ConfigError("gs_visit must lie in 1..j_visits")
        if not (0 < self.sensitivity <= 1 and 0 < self.specificity <= 1):
            raise ConfigError("sensitivity and specificity must lie in (0, 1]")
        if not self.beta:
            raise ConfigError("beta must have at least one coefficient")
        kind = self.covariate_law.get("kind")
        if kind not in _LAW_KINDS:
            raise ConfigError(f"unknown covariate law kind: {kind!r}")
        if self.survey is not None:
            unknown = set(self.survey) - _SURVEY_KEYS
            if unknown:
                raise ConfigError(f"unknown survey config keys: {sorted(unknown)}")
        if self.error_model is not None:
            unknown = set(self.error_model) - _ERROR_MODEL_KEYS
            if unknown:
                raise ConfigError(f"unknown error_model keys: {sorted(unknown)}")
            if kind != "hchs":
                raise ConfigError("error_model requires the hchs covariate law")

    _FIELDS = (
        "n_target", "j_visits", "gs_visit", "beta", "lambda_b", "covariate_law",
        "sensitivity", "specificity", "mr", "replicates", "seed",
        "aux_missing_rate", "survey", "error_model", "monotone_dropout", "label",
    )

    @classmethod
    def from_dict(cls, data: dict) -> "SimDesign":
        unknown = set(data) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown design keys: {sorted(unknown)}")
        missing = {
            "n_target", "j_visits", "gs_visit", "beta", "lambda_b",
            "covariate_law", "sensitivity", "specificity", "mr",
            "replicates", "seed",
        } - set(data)
        if missing:
            raise ConfigError(f"missing design keys: {sorted(missing)}")
        kw = dict(data)
        kw["beta"] = tuple(kw["beta"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["beta"] = list(self.beta)
        return out

    @classmethod
    def from_json(cls, path) -> "SimDesign":
        try:
            handle = open(path)
        except FileNotFoundError:
            raise ConfigError(f"design file not found: {path}")
        with handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: design must be a JSON object")
        return cls.from_dict(data)

    def to_json(self, path) -> None:
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def bundled_design_names() -> tuple[str, ...]:
    """Stem names of the ready-made design files shipped with the package."""
    root = resources.files(__package__) / "designs"
    return tuple(sorted(
        entry.name[:-5] for entry in root.iterdir() if entry.name.endswith(".json")
    ))


def bundled_design(name: str) -> SimDesign:
    """Load a packaged example design by its stem name."""
    entry = resources.files(__package__) / "designs" / f"{name}.json"
    if not entry.is_file():
        raise ConfigError(
            f"unknown bundled design {name!r}; available: "
            + ", ".join(bundled_design_names())
        )
    with resources.as_file(entry) as path:
        return SimDesign.from_json(path)


@dataclass(frozen=True)
class CalibrationSubset:
    """Biomarker subsample rows used to fit the calibration model."""

    ids: tuple
    x_star: np.ndarray
    x_double_star: np.ndarray
    z: np.ndarray | None


@dataclass(frozen=True)
class HchsSample:
    """Large-cohort draw: analysis data plus its calibration subset."""

    dataset: Dataset
    calibration: CalibrationSubset
    latent_intervals: np.ndarray  # j_visits + 1 encodes "beyond the grid"


def _rng_for(design: SimDesign, seed) -> np.random.Generator:
    if seed is None:
        seed = design.seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def _event_intervals(rng, design: SimDesign, linpred: np.ndarray) -> np.ndarray:
    """First interval containing T, or j_visits+1 when T survives the grid."""
    rate = design.lambda_b * np.exp(linpred)
    t = rng.exponential(1.0 / rate)
    grid = np.arange(1.0, design.j_visits + 1)
    return np.searchsorted(grid, t, side="left") + 1


def _outcome_rows(rng, design: SimDesign, intervals: np.ndarray):
    """Per subject: (aux_visit_indices, aux_results, gs_status)."""
    n = len(intervals)
    j = design.j_visits
    visits = np.arange(1, j + 1)
    truth = intervals[:, None] <= visits[None, :]
    p_pos = np.where(truth, design.sensitivity, 1.0 - design.specificity)
    reports = (rng.uniform(size=(n, j)) < p_pos).astype(np.int8)
    if design.monotone_dropout and design.aux_missing_rate > 0:
        # dropout onset is geometric: P(miss visit 1) equals the i.i.d. rate,
        # and once a visit is missed all later ones are too
        onset = rng.geometric(design.aux_missing_rate, size=n)
        attended = visits[None, :] < onset[:, None]
    else:
        attended = rng.uniform(size=(n, j)) >= design.aux_missing_rate
    gs_missing = rng.uniform(size=n) < design.mr
    gs_events = intervals <= design.gs_visit

    rows = []
    for i in range(n):
        idx = []
        res = []
        for k in range(j):
            if not attended[i, k]:
                continue
            idx.append(k + 1)
            r = int(reports[i, k])
            res.append(r)
            if r == 1:
                break
        status = None if gs_missing[i] else int(gs_events[i])
        rows.append((tuple(idx), tuple(res), status))
    return rows


def _draw_simple_covariates(rng, law: dict, n: int) -> np.ndarray:
    kind = law["kind"]
    if kind == "gamma":
        return rng.gamma(law.get("shape", 0.2), law.get("scale", 1.0), size=(n, 1))
    if kind == "normal":
        return rng.normal(law.get("mean", 0.2), math.sqrt(law.get("var", 1.0)), size=(n, 1))
    raise ConfigError(f"covariate law {kind!r} is not a simple-random-sample law")


def _assemble(design: SimDesign, covariates, outcome_rows, *, ids=None,
              weights=None, strata=None, clusters=None) -> Dataset:
    schedule = VisitSchedule.annual(design.j_visits)
    misclass = MisclassSpec(design.sensitivity, design.specificity)
    subjects = []
    for i, (idx, res, status) in enumerate(outcome_rows):
        subjects.append(SubjectRecord(
            id=ids[i] if ids is not None else i,
            aux_results=res,
            aux_visit_indices=idx,
            gs_visit_index=design.gs_visit,
            gs_status=status,
            covariates=tuple(covariates[i]),
            weight=1.0 if weights is None else float(weights[i]),
            stratum_id=None if strata is None else strata[i],
            cluster_id=None if clusters is None else clusters[i],
        ))
    return Dataset(schedule=schedule, subjects=subjects, misclass=misclass)


def generate_srs(design: SimDesign, seed=None) -> Dataset:
    """Simple random sample under a gamma or normal covariate law."""
    rng = _rng_for(design, seed)
    x = _draw_simple_covariates(rng, design.covariate_law, design.n_target)
    linpred = x @ np.asarray(design.beta)
    intervals = _event_intervals(rng, design, linpred)
    return _assemble(design, x, _outcome_rows(rng, design, intervals))


def _stratum_params(design: SimDesign):
    law = design.covariate_law
    kind = law["kind"]
    if kind == "stratified_gamma":
        return kind, tuple(tuple(p) for p in law.get("params", DEFAULT_STRATUM_GAMMA))
    if kind == "stratified_normal":
        return kind, tuple(tuple(p) for p in law.get("params", DEFAULT_STRATUM_NORMAL))
    raise ConfigError(f"survey designs need a stratified covariate law, got {kind!r}")


def generate_survey(design: SimDesign, seed=None) -> Dataset:
    """Stratified three-stage sample with weight = 1 / inclusion probability.

    Stage 1 samples block groups per stratum (SRS), stage 2 samples
    households within selected block groups at a common fraction chosen to
    land near n_target, stage 3 takes every household member. Covariate
    parameters get a block-group perturbation: Uniform(+-0.15 * parameter).
    """
    if design.survey is None:
        raise ConfigError("generate_survey needs a survey config block")
    rng = _rng_for(design, seed)
    kind, params = _stratum_params(design)
    cfg = design.survey
    n_strata = len(params)
    superpop = int(cfg.get("superpopulation", 20000))
    shares = cfg.get("stratum_shares")
    if shares is None:
        shares = [1.0 / n_strata] * n_strata
    if len(shares) != n_strata or abs(sum(shares) - 1.0) > 1e-9:
        raise ConfigError("stratum_shares must match the stratum count and sum to 1")
    bg_per = cfg.get("bg_per_stratum", 40)
    bg_per = [bg_per] * n_strata if np.isscalar(bg_per) else list(bg_per)
    bg_take = cfg.get("bg_sampled", 12)
    bg_take = [bg_take] * n_strata if np.isscalar(bg_take) else list(bg_take)
    hh_probs = cfg.get("household_size_probs", (0.20, 0.30, 0.25, 0.15, 0.10))
    hh_sizes = np.arange(1, len(hh_probs) + 1)
    perturb = float(cfg.get("bg_perturbation", 0.15))

    for s in range(n_strata):
        if not 1 <= bg_take[s] <= bg_per[s]:
            raise ConfigError(
                f"stratum {s + 1}: cannot sample {bg_take[s]} of {bg_per[s]} block groups"
            )

    # stage 1: per-stratum household structure and block-group selection
    selected = []  # (stratum, bg_label, pi1, household member counts)
    for s in range(n_strata):
        target_pop = shares[s] * superpop
        mean_size = float(hh_sizes @ np.asarray(hh_probs))
        n_households = max(bg_per[s], int(round(target_pop / mean_size)))
        sizes = rng.choice(hh_sizes, size=n_households, p=hh_probs)
        bg_of_household = rng.integers(0, bg_per[s], size=n_households)
        pi1 = bg_take[s] / bg_per[s]
        chosen = rng.choice(bg_per[s], size=bg_take[s], replace=False)
        for g in chosen:
            members = sizes[bg_of_household == g]
            selected.append((s, int(g), pi1, members))

    total_selected_members = sum(int(m.sum()) for *_rest, m in selected)
    if total_selected_members == 0:
        raise ConfigError("survey config selected no population members")
    f2 = min(1.0, design.n_target / total_selected_members)

    cov_rows, weights, strata, clusters = [], [], [], []
    for s, g, pi1, members in selected:
        n_hh = len(members)
        if n_hh == 0:
            continue
        take = max(1, int(round(f2 * n_hh))) if f2 < 1.0 else n_hh
        take = min(take, n_hh)
        pi2 = take / n_hh
        hh_idx = rng.choice(n_hh, size=take, replace=False)
        n_members = int(members[hh_idx].sum())
        shape_or_mean, scale = params[s]
        lo, hi = 1.0 - perturb, 1.0 + perturb
        a = shape_or_mean * rng.uniform(lo, hi)
        b = scale * rng.uniform(lo, hi)
        if kind == "stratified_gamma":
            x = rng.gamma(a, b, size=n_members)
        else:
            x = rng.normal(a, math.sqrt(b), size=n_members)
        cov_rows.append(x)
        weights.append(np.full(n_members, 1.0 / (pi1 * pi2)))
        strata.extend([f"s{s + 1}"] * n_members)
        clusters.extend([f"s{s + 1}-bg{g}"] * n_members)

    x = np.concatenate(cov_rows)[:, None]
    weights = np.concatenate(weights)
    linpred = x @ np.asarray(design.beta)
    intervals = _event_intervals(rng, design, linpred)
    return _assemble(
        design, x, _outcome_rows(rng, design, intervals),
        weights=weights, strata=strata, clusters=clusters,
    )


def generate_hchs_like(design: SimDesign, seed=None) -> HchsSample:
    """Large-cohort draw with grouped covariates and a mismeasured exposure.

    Covariates (X, Z1, Z2) are multivariate normal within sex-by-background
    cells; the analysis dataset carries (X*, Z1, Z2) where X* follows the
    configured linear error model, and a random biomarker subset of size n_c
    carries X** = X + classical error.
    """
    if design.error_model is None:
        raise ConfigError("generate_hchs_like needs an error_model block")
    rng = _rng_for(design, seed)
    em = design.error_model
    alpha = [float(a) for a in em.get("alpha", (0.05, 0.50, 0.003, 0.0009))]
    if len(alpha) != 4:
        raise ConfigError("error_model alpha must have four entries")
    sigma2_e = float(em.get("sigma2_e", 0.389))
    sigma2_eps = float(em.get("sigma2_eps", 0.019))
    n_c = int(em.get("n_c", 450))
    n = design.n_target
    if not 0 < n_c <= n:
        raise ConfigError("error_model n_c must lie in 1..n_target")

    sex = rng.choice(2, size=n, p=_HCHS_SEX_P)
    background = rng.choice(3, size=n, p=_HCHS_BACKGROUND_P)
    means = np.asarray(_HCHS_BASE_MEAN) + np.zeros((n, 3))
    means[:, 0] += np.asarray(_HCHS_SEX_SHIFT)[sex]
    means[:, 0] += np.asarray(_HCHS_BACKGROUND_SHIFT)[background]
    chol = np.linalg.cholesky(np.asarray(_HCHS_WITHIN_COV))
    xyz = means + rng.standard_normal((n, 3)) @ chol.T
    x_true, z1, z2 = xyz[:, 0], xyz[:, 1], xyz[:, 2]

    x_star = (alpha[0] + alpha[1] * x_true + alpha[2] * z1 + alpha[3] * z2
              + rng.normal(0.0, math.sqrt(sigma2_e), size=n))
    covariates = np.column_stack([x_star, z1, z2])

    linpred = xyz @ np.asarray(design.beta)
    intervals = _event_intervals(rng, design, linpred)
    dataset = _assemble(design, covariates, _outcome_rows(rng, design, intervals))

    subset = rng.choice(n, size=n_c, replace=False)
    x_dstar = x_true[subset] + rng.normal(0.0, math.sqrt(sigma2_eps), size=n_c)
    calibration = CalibrationSubset(
        ids=tuple(int(i) for i in subset),
        x_star=x_star[subset],
        x_double_star=x_dstar,
        z=np.column_stack([z1[subset], z2[subset]]),
    )
    return HchsSample(dataset=dataset, calibration=calibration,
                      latent_intervals=intervals)


def censoring_rate(design: SimDesign, seed=None, replicates: int = 10) -> float:
    """Monte Carlo estimate of P(T beyond the visit grid) under the design."""
    root = np.random.SeedSequence(design.seed if seed is None else seed)
    beyond = 0
    total = 0
    for child in root.spawn(replicates):
        rng = np.random.default_rng(child)
        if design.covariate_law["kind"] == "hchs":
            sample = generate_hchs_like(design, seed=child)
            intervals = sample.latent_intervals
        else:
            x = _draw_simple_covariates(rng, design.covariate_law, design.n_target)
            intervals = _event_intervals(rng, design, x @ np.asarray(design.beta))
        beyond += int(np.sum(intervals > design.j_visits))
        total += len(intervals)
    return beyond / total


# ---------------------------------------------------------------------------
# replicate harness


@dataclass(frozen=True)
class EstimateRecord:
    estimate: float
    se: float
    covered: bool
    rejected: bool
    converged: bool


@dataclass(frozen=True)
class ReplicateRecord:
    index: int
    proposed: EstimateRecord | None
    standard: EstimateRecord | None
    re: float | None
    error: str | None = None

    @property
    def usable(self) -> bool:
        return (self.error is None and self.proposed is not None
                and self.standard is not None
                and self.proposed.converged and self.standard.converged)


@dataclass(frozen=True)
class MetricBlock:
    median_pct_bias: float | None
    median_ase: float
    mad: float
    cp: float
    rejection_rate: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class StudySummary:
    label: str
    n_replicates: int
    n_usable: int
    n_errors: int
    true_beta: float
    proposed: MetricBlock | None
    standard: MetricBlock | None
    median_re: float | None
    replicate_records: tuple[ReplicateRecord, ...] = dataclasses.field(repr=False, default=())

    def to_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "label": self.label,
            "n_replicates": self.n_replicates,
            "n_usable": self.n_usable,
            "n_errors": self.n_errors,
            "true_beta": self.true_beta,
            "proposed": None if self.proposed is None else self.proposed.to_dict(),
            "standard": None if self.standard is None else self.standard.to_dict(),
            "median_re": self.median_re,
        }
        if include_replicates:
            out["replicates"] = [
                {
                    "index": r.index,
                    "error": r.error,
                    "proposed": None if r.proposed is None else dataclasses.asdict(r.proposed),
                    "standard": None if r.standard is None else dataclasses.asdict(r.standard),
                    "re": r.re,
                }
                for r in self.replicate_records
            ]
        return out


def _estimate_record(estimate, se, true_beta) -> EstimateRecord:
    covered = bool(estimate - _Z95 * se <= true_beta <= estimate + _Z95 * se)
    rejected = bool(abs(estimate) > _Z95 * se)
    return EstimateRecord(float(estimate), float(se), covered, rejected, True)


def _mi_fit_fns(dataset, packed, z):
    """Build the proposed/standard refit hooks sharing packed outcome data."""
    state = {"beta": None, "lam": None}
    gs_keep = np.array([not s.gs_missing for s in dataset.subjects])
    y_glm = np.array(
        [s.gs_status for s in dataset.subjects if not s.gs_missing], dtype=float
    )

    def fit_proposed(xhat):
        options = FitOptions(beta_start=state["beta"], lam_start=state["lam"])
        covs = np.column_stack([xhat, z])
        result = fit(dataset, options=options, packed=packed.with_covariates(covs))
        if result.converged and result.beta_cov is not None:
            state["beta"] = result.params.beta
            state["lam"] = result.params.lam
            return result.beta, np.diag(result.beta_cov), True
        return result.beta, np.full(len(result.beta), np.nan), False

    def fit_glm(xhat):
        covs = np.column_stack([xhat, z])[gs_keep]
        g = fit_cloglog(y_glm, covs)
        ok = g.converged and g.covariance is not None
        if not ok:
            return g.coefficients[1:], np.full(covs.shape[1], np.nan), False
        return g.coefficients[1:], np.diag(g.covariance)[1:], True

    return fit_proposed, fit_glm


def _run_replicate(design: SimDesign, index: int) -> ReplicateRecord:
    child = np.random.SeedSequence(design.seed, spawn_key=(index,))
    true_beta = design.beta[0]
    try:
        if design.error_model is not None:
            return _run_mi_replicate(design, index, child, true_beta)
        if design.survey is not None:
            dataset = generate_survey(design, seed=child)
            sdesign = SurveyDesign.from_dataset(dataset)
        else:
            dataset = generate_srs(design, seed=child)
            sdesign = None
        prop = fit(dataset, design=sdesign)
        std = fit_standard(dataset, sdesign)
        prop_ok = prop.converged and prop.beta_cov is not None
        std_ok = std.converged and std.covariance is not None
        prop_rec = None
        std_rec = None
        re = None
        if prop_ok:
            prop_rec = _estimate_record(prop.beta[0], prop.beta_se()[0], true_beta)
        if std_ok:
            k = std.coefficient_index(0)
            std_rec = _estimate_record(std.coefficients[k], std.se()[k], true_beta)
        if prop_ok and std_ok:
            re = relative_efficiency(prop, std, 0)
        return ReplicateRecord(index, prop_rec, std_rec, re)
    except Exception as exc:  # recorded, never fatal to the study
        return ReplicateRecord(index, None, None, None, error=f"{type(exc).__name__}: {exc}")


def _run_mi_replicate(design, index, child, true_beta) -> ReplicateRecord:
    sample = generate_hchs_like(design, seed=child)
    dataset = sample.dataset
    cal = sample.calibration
    em = design.error_model
    m_imp = int(em.get("m_imputations", 25))
    method = em.get("method", "parametric")

    model = fit_calibration(cal.x_double_star, cal.x_star, cal.z)
    covs = np.array([s.covariates for s in dataset.subjects], dtype=float)
    x_star, z = covs[:, 0], covs[:, 1:]

    packed = pack_dataset(dataset)
    fit_proposed, fit_glm = _mi_fit_fns(dataset, packed, z)

    seed_prop, seed_std = child.spawn(2)
    kwargs = {}
    if method == "bootstrap":
        kwargs = {"method": "bootstrap",
                  "calibration_rows": (cal.x_double_star, cal.x_star, cal.z)}
    combined_prop = mi_variance(fit_proposed, model, x_star, z, M=m_imp,
                                rng_seed=seed_prop, **kwargs)
    combined_std = mi_variance(fit_glm, model, x_star, z, M=m_imp,
                               rng_seed=seed_std, **kwargs)

    prop_rec = _estimate_record(
        combined_prop.point_estimate[0], combined_prop.se[0], true_beta
    )
    std_rec = _estimate_record(
        combined_std.point_estimate[0], combined_std.se[0], true_beta
    )
    flagged = combined_prop.high_failure_rate or combined_std.high_failure_rate
    if flagged:
        prop_rec = dataclasses.replace(prop_rec, converged=False)
        std_rec = dataclasses.replace(std_rec, converged=False)
    re = float((combined_std.se[0] / combined_prop.se[0]) ** 2)
    return ReplicateRecord(index, prop_rec, std_rec, re)


def _metric_block(records, pick, true_beta) -> MetricBlock | None:
    recs = [pick(r) for r in records]
    recs = [r for r in recs if r is not None and r.converged]
    if not recs:
        return None
    est = np.array([r.estimate for r in recs])
    se = np.array([r.se for r in recs])
    if true_beta != 0.0:
        pct_bias = float(np.median((est - true_beta) / true_beta * 100.0))
    else:
        pct_bias = None
    center = float(np.median(est))
    mad = float(1.4826 * np.median(np.abs(est - center)))
    return MetricBlock(
        median_pct_bias=pct_bias,
        median_ase=float(np.median(se)),
        mad=mad,
        cp=float(np.mean([r.covered for r in recs])),
        rejection_rate=float(np.mean([r.rejected for r in recs])),
    )


def run_study(design: SimDesign, progress=None) -> StudySummary:
    """Run every replicate of a design and aggregate the summary metrics.

    Deterministic for a fixed design (seed included): each replicate draws
    from the substream keyed by its index, so scheduling cannot change
    results. AUGLIK_THREADS caps the worker count (default: logical cores).
    """
    indices = range(design.replicates)
    env = os.environ.get("AUGLIK_THREADS")
    workers = int(env) if env else (os.cpu_count() or 1)
    workers = max(1, min(workers, design.replicates))

    records = []
    if workers == 1:
        for i in indices:
            records.append(_run_replicate(design, i))
            if progress is not None:
                progress(len(records), design.replicates)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_replicate, [design] * design.replicates, indices):
                records.append(rec)
                if progress is not None:
                    progress(len(records), design.replicates)
    records.sort(key=lambda r: r.index)

    usable = [r for r in records if r.usable]
    true_beta = design.beta[0]
    res = [r.re for r in usable if r.re is not None]
    return StudySummary(
        label=design.label,
        n_replicates=design.replicates,
        n_usable=len(usable),
        n_errors=sum(1 for r in records if r.error is not None),
        true_beta=true_beta,
        proposed=_metric_block(usable, lambda r: r.proposed, true_beta),
        standard=_metric_block(usable, lambda r: r.standard, true_beta),
        median_re=float(np.median(res)) if res else None,
        replicate_records=tuple(records),
    )


def write_summary_csv(summary: StudySummary, path) -> None:
    """Two-row metrics table: %Bias, ASE, MAD, CP, RE per estimator."""

    def fmt(value, digits=3):
        return "" if value is None else f"{value:.{digits}f}"

    lines = ["Estimator,%Bias,ASE,MAD,CP,RE"]
    for name, block in (("Proposed", summary.proposed), ("Standard", summary.standard)):
        if block is None:
            lines.append(f"{name},,,,,")
            continue
        re_cell = fmt(summary.median_re) if name == "Proposed" else ""
        lines.append(
            f"{name},{fmt(block.median_pct_bias)},{fmt(block.median_ase)},"
            f"{fmt(block.mad)},{fmt(block.cp)},{re_cell}"
        )
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
