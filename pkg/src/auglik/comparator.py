"""Baseline estimator: binomial regression with a complementary log-log link.

Fitting the once-observed gold-standard status on covariates with this link
is the discrete proportional hazards analysis that ignores the error-prone
interim reports; its variance is the yardstick for relative efficiency.
"""

from __future__ import annotations

import numpy as np

from .data_model import Dataset
from .errors import DesignError
from .estimation import FitResult, SurveyDesign, sandwich_covariance

__all__ = [
    "cloglog",
    "inverse_cloglog",
    "GlmFit",
    "fit_cloglog",
    "fit_standard",
    "relative_efficiency",
]

_ETA_MAX = 30.0
_P_EPS = 1e-15


def cloglog(p):
    """log(-log(1 - p)) with clipping away from 0 and 1."""
    p = np.clip(np.asarray(p, dtype=float), _P_EPS, 1.0 - _P_EPS)
    return np.log(-np.log1p(-p))


def inverse_cloglog(eta):
    """1 - exp(-exp(eta)), with eta clamped at 30 to avoid overflow."""
    eta = np.minimum(np.asarray(eta, dtype=float), _ETA_MAX)
    return -np.expm1(-np.exp(eta))


class GlmFit:
    """Coefficients, covariance, and convergence state of one cloglog fit."""

    def __init__(self, coefficients, covariance, cov_kind, converged, iterations,
                 final_score_norm, has_intercept, cov_message=None):
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.covariance = covariance
        self.cov_kind = cov_kind
        self.converged = converged
        self.iterations = iterations
        self.final_score_norm = final_score_norm
        self.has_intercept = has_intercept
        self.cov_message = cov_message

    def se(self) -> np.ndarray:
        if self.covariance is None:
            raise ValueError("covariance unavailable: " + (self.cov_message or "unknown"))
        return np.sqrt(np.diag(self.covariance))

    def coefficient_index(self, covariate_index: int) -> int:
        return covariate_index + 1 if self.has_intercept else covariate_index


def _loglik(y, mu, w):
    mu = np.clip(mu, _P_EPS, 1.0 - _P_EPS)
    return float(np.sum(w * (y * np.log(mu) + (1.0 - y) * np.log1p(-mu))))


def fit_cloglog(
    y,
    x,
    design: SurveyDesign | None = None,
    weights=None,
    add_intercept: bool = True,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> GlmFit:
    """Weighted Bernoulli cloglog regression by iteratively reweighted LS.

    Covariance is model-based (X'WX)^-1 without a design, or the stratified
    cluster sandwich sharing the estimation module's variance routine.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(y)
    if design is not None:
        w = design.weights
    elif weights is not None:
        w = np.asarray(weights, dtype=float)
    else:
        w = np.ones(n)
    if add_intercept:
        x = np.column_stack([np.ones(n), x])
    p = x.shape[1]

    # start from the intercept-only solution, slopes at zero
    ybar = float(np.sum(w * y) / np.sum(w))
    beta = np.zeros(p)
    beta[0] = cloglog(max(min(ybar, 1.0 - 1e-6), 1e-6))

    def score_and_weights(b):
        eta = np.clip(x @ b, -_ETA_MAX, _ETA_MAX)
        mu = np.clip(-np.expm1(-np.exp(eta)), _P_EPS, 1.0 - _P_EPS)
        # d mu / d eta; floor the exponent so saturated rows (eta > ~6.6,
        # where exp(eta - exp(eta)) underflows) keep the working response
        # finite instead of dividing by zero during wild intermediate steps
        dmu = np.exp(np.maximum(eta - np.exp(eta), -700.0))
        var = mu * (1.0 - mu)
        u_rows = x * ((y - mu) * dmu / var)[:, None]
        irls_w = w * dmu * dmu / var
        return eta, mu, dmu, u_rows, irls_w

    eta, mu, dmu, u_rows, irls_w = score_and_weights(beta)
    ll = _loglik(y, mu, w)
    converged = False
    score_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        score = w @ u_rows
        score_norm = float(np.max(np.abs(score)))
        if score_norm <= tol:
            converged = True
            break
        z = eta + (y - mu) / dmu
        xtw = x.T * irls_w
        try:
            beta_new = np.linalg.solve(xtw @ x, xtw @ z)
        except np.linalg.LinAlgError:
            break
        # step-halve when the likelihood drops (keeps separation runs bounded)
        step = beta_new - beta
        for _ in range(30):
            eta, mu, dmu, u_rows, irls_w = score_and_weights(beta + step)
            ll_new = _loglik(y, mu, w)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step *= 0.5
        beta = beta + step
        ll = ll_new

    if converged and float(np.max(np.abs(x @ beta))) > _ETA_MAX:
        # the clamped score vanished but the raw linear predictor sits past
        # the clamp: the unclamped likelihood is still climbing (separation)
        converged = False

    xtwx = (x.T * irls_w) @ x
    cov = None
    cov_kind = "model_based" if design is None else "survey_sandwich"
    cov_message = None
    try:
        bread = np.linalg.inv(xtwx)
        if design is None:
            cov = bread
        else:
            influence = u_rows @ bread.T
            cov = sandwich_covariance(influence, design)
    except np.linalg.LinAlgError:
        cov_message = "information matrix is singular"
    except DesignError:
        raise
    if not converged:
        cov_message = cov_message or "fit did not converge (possible separation)"
    return GlmFit(
        coefficients=beta,
        covariance=cov,
        cov_kind=cov_kind,
        converged=converged,
        iterations=it,
        final_score_norm=score_norm,
        has_intercept=add_intercept,
        cov_message=cov_message,
    )


def fit_standard(dataset: Dataset, design: SurveyDesign | None = None) -> GlmFit:
    """The no-auxiliary-data analysis of a Dataset.

    Regresses observed gold-standard status on the covariates; subjects with
    a missing gold standard are dropped (the design is subset to match).
    """
    keep = [i for i, s in enumerate(dataset.subjects) if not s.gs_missing]
    y = np.array([dataset.subjects[i].gs_status for i in keep], dtype=float)
    x = np.array([dataset.subjects[i].covariates for i in keep], dtype=float)
    if design is not None:
        design = SurveyDesign(
            design.strata[keep], design.clusters[keep], design.weights[keep]
        )
    return fit_cloglog(y, x, design=design)


def relative_efficiency(fit_proposed: FitResult, fit_standard_: GlmFit,
                        covariate_index: int = 0) -> float:
    """Var_standard / Var_proposed for one covariate's coefficient.

    Values above 1 mean the augmented estimator is the more precise one.
    """
    if fit_proposed.beta_cov is None:
        raise ValueError("proposed-fit covariance unavailable: "
                         + (fit_proposed.cov_message or "unknown"))
    if fit_standard_.covariance is None:
        raise ValueError("standard-fit covariance unavailable: "
                         + (fit_standard_.cov_message or "unknown"))
    var_prop = float(fit_proposed.beta_cov[covariate_index, covariate_index])
    k = fit_standard_.coefficient_index(covariate_index)
    var_std = float(fit_standard_.covariance[k, k])
    if not np.isfinite(var_prop) or var_prop <= 0.0:
        raise ValueError("proposed-fit variance is not positive")
    return var_std / var_prop
