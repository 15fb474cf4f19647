"""Fitting the augmented likelihood and estimating parameter covariance.

The weighted log-likelihood is maximized by a box-constrained limited-memory
quasi-Newton routine (lam_1 and beta free, lam_k >= 0 for k >= 2). Covariance
is the inverse negative Hessian (central finite differences of the analytic
gradient) for unweighted fits, or the design-based sandwich for survey fits:
influence rows are bread^-1 times the unweighted score rows, and the meat is
the stratified with-replacement cluster variance of their weighted totals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data_model import Dataset
from .errors import ConfigError, DesignError
from .likelihood import ParamVector, _core, default_lam, lam_to_survival, pack_dataset

__all__ = [
    "FitOptions",
    "SurveyDesign",
    "FitResult",
    "fit",
    "hessian_covariance",
    "sandwich_covariance",
    "finite_difference_hessian",
]

_BOUNDARY_TOL = 1e-8


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings; defaults follow the estimation contract."""

    beta_start: tuple[float, ...] | None = None
    lam_start: tuple[float, ...] | None = None
    initsurv: float = 0.1
    tol: float = 1e-7
    max_iter: int = 500

    _FIELDS = ("beta_start", "lam_start", "initsurv", "tol", "max_iter")

    @classmethod
    def from_dict(cls, data: dict) -> "FitOptions":
        unknown = set(data) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown fit option keys: {sorted(unknown)}")
        kw = dict(data)
        for key in ("beta_start", "lam_start"):
            if kw.get(key) is not None:
                kw[key] = tuple(float(b) for b in kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "beta_start": None if self.beta_start is None else list(self.beta_start),
            "lam_start": None if self.lam_start is None else list(self.lam_start),
            "initsurv": self.initsurv,
            "tol": self.tol,
            "max_iter": self.max_iter,
        }


@dataclass(frozen=True)
class SurveyDesign:
    """Per-subject stratum/cluster labels and sampling weights."""

    strata: np.ndarray
    clusters: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "strata", np.asarray(self.strata, dtype=object))
        object.__setattr__(self, "clusters", np.asarray(self.clusters, dtype=object))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        n = len(self.weights)
        if len(self.strata) != n or len(self.clusters) != n:
            raise DesignError("design arrays have mismatched lengths")
        stratum_of: dict = {}
        for s, c in zip(self.strata, self.clusters):
            prev = stratum_of.setdefault(c, s)
            if prev != s:
                raise DesignError(f"cluster {c!r} appears in strata {prev!r} and {s!r}")

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "SurveyDesign":
        """Defaults: one stratum, each subject its own cluster."""
        strata = [s.stratum_id if s.stratum_id is not None else 0 for s in dataset.subjects]
        clusters = [
            s.cluster_id if s.cluster_id is not None else s.id for s in dataset.subjects
        ]
        weights = [s.weight for s in dataset.subjects]
        return cls(np.array(strata, dtype=object), np.array(clusters, dtype=object),
                   np.array(weights, dtype=float))

    def cluster_totals(self, rows: np.ndarray):
        """Per-(stratum, cluster) totals of rows; returns {stratum: (n_c, dim) array}."""
        codes: dict = {}
        index = np.empty(len(self.weights), dtype=np.int64)
        for i, key in enumerate(zip(self.strata, self.clusters)):
            index[i] = codes.setdefault(key, len(codes))
        totals = np.zeros((len(codes), rows.shape[1]))
        np.add.at(totals, index, rows)
        by_stratum: dict = {}
        for (stratum, _cluster), code in codes.items():
            by_stratum.setdefault(stratum, []).append(code)
        return {s: totals[idx] for s, idx in by_stratum.items()}


@dataclass(frozen=True)
class FitResult:
    """Optimum, covariance, and diagnostics for one augmented-likelihood fit."""

    params: ParamVector
    survival: np.ndarray
    beta_cov: np.ndarray | None
    full_cov: np.ndarray | None
    cov_kind: str  # "hessian_inverse" or "survey_sandwich"
    influence: np.ndarray | None
    converged: bool
    iterations: int
    final_gradient_norm: float
    loglik_at_optimum: float
    boundary_lam_indices: tuple[int, ...] = ()
    cov_message: str | None = None

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.params.beta)

    def beta_se(self) -> np.ndarray:
        if self.beta_cov is None:
            raise ValueError("covariance unavailable: " + (self.cov_message or "unknown"))
        return np.sqrt(np.diag(self.beta_cov))


def _weighted_score_total(packed, x, weights) -> np.ndarray:
    n_beta = packed.n_beta
    _terms, _floored, scores = _core(packed, x[:n_beta], x[n_beta:], want_score=True)
    return weights @ scores


def finite_difference_hessian(grad_fn, x, lower_bounds=None, base_step=1e-5) -> np.ndarray:
    """Central differences of a gradient; one-sided where a bound is too close.

    Step per coordinate: h_k = max(base_step, base_step * |x_k|).
    """
    x = np.asarray(x, dtype=float)
    dim = len(x)
    hess = np.empty((dim, dim))
    for k in range(dim):
        h = max(base_step, base_step * abs(x[k]))
        lo = -np.inf if lower_bounds is None else lower_bounds[k]
        xp = x.copy()
        xp[k] += h
        if x[k] - h >= lo:
            xm = x.copy()
            xm[k] -= h
            hess[:, k] = (grad_fn(xp) - grad_fn(xm)) / (2.0 * h)
        else:
            hess[:, k] = (grad_fn(xp) - grad_fn(x)) / h
    return 0.5 * (hess + hess.T)


def _invert_neg_hessian(neg_hess_free):
    """Cholesky inverse; None + message when not positive definite."""
    try:
        chol = np.linalg.cholesky(neg_hess_free)
    except np.linalg.LinAlgError:
        return None, "negative Hessian is not positive definite"
    inv_chol = np.linalg.inv(chol)
    return inv_chol.T @ inv_chol, None


def _embed(free_matrix, free_idx, dim):
    out = np.full((dim, dim), np.nan)
    out[np.ix_(free_idx, free_idx)] = free_matrix
    return out


def _free_coordinates(x, n_beta):
    """All coordinates except lam_k (k >= 2) pinned at the zero bound."""
    dim = len(x)
    boundary = [
        k for k in range(n_beta + 1, dim) if x[k] <= _BOUNDARY_TOL
    ]
    free = [k for k in range(dim) if k not in boundary]
    lam_indices = tuple(k - n_beta + 1 for k in boundary)  # 1-based lam positions
    return np.asarray(free, dtype=np.int64), lam_indices


def _lower_bounds(n_beta, n_lam) -> np.ndarray:
    lb = np.full(n_beta + n_lam, -np.inf)
    lb[n_beta + 1:] = 0.0
    return lb


def sandwich_covariance(influence: np.ndarray, design: SurveyDesign) -> np.ndarray:
    """Stratified with-replacement cluster variance of weighted influence totals.

    v_h = n_h/(n_h - 1) * sum_c (z_hc - zbar_h)(z_hc - zbar_h)' with
    z_hc the within-cluster total of weight * influence; returns sum_h v_h.
    """
    influence = np.asarray(influence, dtype=float)
    weighted = design.weights[:, None] * influence
    total = np.zeros((influence.shape[1], influence.shape[1]))
    for stratum, z in design.cluster_totals(weighted).items():
        n_h = z.shape[0]
        if n_h < 2:
            raise DesignError(
                f"stratum {stratum!r} has a single sampled cluster; "
                "variance estimation needs at least two"
            )
        centered = z - z.mean(axis=0)
        total += (n_h / (n_h - 1.0)) * (centered.T @ centered)
    return total


def _covariance_for(packed, x, weights, design, scores):
    """Covariance at the optimum x; returns (full_cov, influence, boundary, message)."""
    n_beta = packed.n_beta
    dim = len(x)
    free, boundary_lams = _free_coordinates(x, n_beta)
    lb = _lower_bounds(n_beta, dim - n_beta)

    def grad_free(x_free):
        x_full = x.copy()
        x_full[free] = x_free
        return _weighted_score_total(packed, x_full, weights)[free]

    neg_hess = -finite_difference_hessian(grad_free, x[free], lower_bounds=lb[free])
    bread, message = _invert_neg_hessian(neg_hess)
    if bread is None:
        return None, None, boundary_lams, message

    if design is None:
        return _embed(bread, free, dim), None, boundary_lams, None

    influence_free = scores[:, free] @ bread.T
    meat_free = sandwich_covariance(influence_free, design)
    influence = np.zeros((scores.shape[0], dim))
    influence[:, free] = influence_free
    return _embed(meat_free, free, dim), influence, boundary_lams, None


def fit(
    dataset: Dataset,
    design: SurveyDesign | None = None,
    options: FitOptions | None = None,
    covariates=None,
    packed=None,
) -> FitResult:
    """Maximize the augmented log-likelihood; weighted when a design is given.

    `covariates` optionally overrides the subjects' covariate matrix, and a
    prebuilt `packed` (from pack_dataset, possibly with_covariates) skips the
    C/D reconstruction: the multiple-imputation hook, where outcome data are
    reused across refits and only the calibrated exposure column changes.
    """
    options = options or FitOptions()
    if packed is None:
        packed = pack_dataset(dataset, covariates=covariates)
    elif covariates is not None:
        packed = packed.with_covariates(covariates)
    n_beta = packed.n_beta
    n_lam = packed.n_visits
    n_obs = packed.cmat.shape[0]
    if design is not None and len(design.weights) != n_obs:
        raise DesignError(
            f"design has {len(design.weights)} rows but the dataset has {n_obs} subjects"
        )
    weights = design.weights if design is not None else np.ones(n_obs)

    beta0 = (
        np.full(n_beta, 0.5)
        if options.beta_start is None
        else np.asarray(options.beta_start, dtype=float)
    )
    if len(beta0) != n_beta:
        raise ConfigError(f"beta_start has length {len(beta0)}, expected {n_beta}")
    lam0 = (
        default_lam(n_lam, options.initsurv)
        if options.lam_start is None
        else np.asarray(options.lam_start, dtype=float)
    )
    if len(lam0) != n_lam:
        raise ConfigError(f"lam_start has length {len(lam0)}, expected {n_lam}")
    x0 = np.concatenate([beta0, lam0])
    bounds = [(None, None)] * (n_beta + 1) + [(0.0, None)] * (n_lam - 1)

    # The optimizer sees the weighted MEAN log-likelihood: tolerances then
    # mean the same thing at any sample size or weight scale.
    scale = 1.0 / float(np.sum(weights))

    def objective(x):
        terms, _floored, scores = _core(packed, x[:n_beta], x[n_beta:], want_score=True)
        value = math.fsum((weights * terms).tolist())
        grad = weights @ scores
        return -value * scale, -grad * scale

    res = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": options.max_iter, "ftol": 1e-14, "gtol": options.tol, "maxcor": 20},
    )

    x_hat = res.x
    terms, _floored, scores = _core(packed, x_hat[:n_beta], x_hat[n_beta:], want_score=True)
    grad = (weights @ scores) * scale
    projected = grad.copy()
    lb = _lower_bounds(n_beta, n_lam)
    at_bound = x_hat <= lb + _BOUNDARY_TOL
    projected[at_bound] = np.maximum(projected[at_bound], 0.0)
    grad_norm = float(np.max(np.abs(projected))) if len(projected) else 0.0
    converged = grad_norm <= options.tol

    full_cov, influence, boundary_lams, message = _covariance_for(
        packed, x_hat, weights, design, scores
    )
    params = ParamVector.from_array(x_hat, n_beta)
    return FitResult(
        params=params,
        survival=lam_to_survival(np.asarray(params.lam)),
        beta_cov=None if full_cov is None else full_cov[:n_beta, :n_beta],
        full_cov=full_cov,
        cov_kind="survey_sandwich" if design is not None else "hessian_inverse",
        influence=influence,
        converged=converged,
        iterations=int(res.nit),
        final_gradient_norm=grad_norm,
        loglik_at_optimum=float(math.fsum((weights * terms).tolist())),
        boundary_lam_indices=boundary_lams,
        cov_message=message,
    )


def hessian_covariance(dataset: Dataset, params: ParamVector) -> np.ndarray | None:
    """Inverse negative Hessian of the unweighted log-likelihood at params.

    Active lam bounds are dropped from the inversion (NaN rows/cols in the
    result); returns None when the reduced Hessian is not invertible.
    """
    packed = pack_dataset(dataset)
    x = params.as_array()
    weights = np.ones(packed.cmat.shape[0])
    full_cov, _infl, _boundary, _msg = _covariance_for(packed, x, weights, None, None)
    return full_cov
