"""Regression calibration for a mismeasured exposure, with multiple-imputation
variance combining.

A biomarker subset carries an unbiased second measurement; regressing it on
the error-prone exposure and error-free covariates gives the calibration
model whose prediction replaces the unknown true exposure. Uncertainty in
the calibration coefficients propagates by redrawing them per imputation,
refitting, and combining with robust center/scale rules: the point estimate
is the across-imputation median and

    se_j = sqrt( median_m(V_jm) + (1.4826 * median_m|b_jm - median(b_j.)|)^2 ).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr

from .errors import DataError

__all__ = [
    "CalibrationModel",
    "MiCombineResult",
    "fit_calibration",
    "predict_xhat",
    "mi_variance",
    "read_calibration_csv",
]

_MAD_SCALE = 1.4826


@dataclass(frozen=True)
class CalibrationModel:
    """OLS fit of the biomarker measurement on (error-prone exposure, covariates)."""

    delta: np.ndarray
    delta_cov: np.ndarray
    residual_variance: float
    design_info: tuple[str, ...]
    n_obs: int

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float))
        object.__setattr__(self, "delta_cov", np.asarray(self.delta_cov, dtype=float))


@dataclass(frozen=True)
class MiCombineResult:
    """Combined estimates over imputations (medians and median/MAD variance)."""

    point_estimate: np.ndarray
    se: np.ndarray
    M: int
    per_imputation: tuple
    n_failed: int
    high_failure_rate: bool


def _design_matrix(x_star, z):
    x_star = np.asarray(x_star, dtype=float)
    if z is None:
        z = np.empty((len(x_star), 0))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if len(z) != len(x_star):
        raise DataError(f"x_star has {len(x_star)} rows but z has {len(z)}")
    return np.column_stack([np.ones(len(x_star)), x_star, z])


def _default_names(q: int) -> tuple[str, ...]:
    return ("intercept", "x_star") + tuple(f"z{i + 1}" for i in range(q))


def fit_calibration(x_double_star, x_star, z=None, column_names=None) -> CalibrationModel:
    """Unweighted least squares of the biomarker on (1, x_star, z columns).

    Coefficient covariance is sigma2_hat * (X'X)^-1 with the residual
    variance on n - (number of columns) degrees of freedom.
    """
    y = np.asarray(x_double_star, dtype=float)
    design = _design_matrix(x_star, z)
    n, ncol = design.shape
    names = tuple(column_names) if column_names is not None else _default_names(ncol - 2)
    if len(names) != ncol:
        raise DataError(f"{len(names)} column names given for {ncol} design columns")
    if len(y) != n:
        raise DataError(f"x_double_star has {len(y)} rows but the design has {n}")
    if n <= ncol:
        raise DataError(
            f"calibration subset has {n} rows; needs more than {ncol} "
            "(the number of design columns)"
        )

    r_mat, pivots = qr(design, mode="r", pivoting=True)
    r_diag = np.abs(np.diag(r_mat))
    tol = max(n, ncol) * np.finfo(float).eps * (r_diag[0] if len(r_diag) else 0.0)
    dependent = [names[pivots[k]] for k in range(ncol) if r_diag[k] <= tol]
    if dependent:
        raise DataError(
            "calibration design matrix is rank deficient; collinear columns: "
            + ", ".join(sorted(dependent))
        )

    xtx = design.T @ design
    delta = np.linalg.solve(xtx, design.T @ y)
    resid = y - design @ delta
    sigma2 = float(resid @ resid) / (n - ncol)
    delta_cov = sigma2 * np.linalg.inv(xtx)
    return CalibrationModel(
        delta=delta,
        delta_cov=delta_cov,
        residual_variance=sigma2,
        design_info=names,
        n_obs=n,
    )


def predict_xhat(model: CalibrationModel, x_star, z=None) -> np.ndarray:
    """Calibrated exposure: delta_0 + delta_1 * x_star + delta_2' z."""
    design = _design_matrix(x_star, z)
    if design.shape[1] != len(model.delta):
        raise DataError(
            f"prediction rows have {design.shape[1]} design columns; "
            f"the calibration model was fit with {len(model.delta)} "
            f"({', '.join(model.design_info)})"
        )
    bad = np.flatnonzero(~np.isfinite(design).all(axis=1))
    if len(bad):
        raise DataError("non-finite covariate in prediction rows", row=int(bad[0]))
    return design @ model.delta


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """A with A A' = cov for any symmetric PSD cov (zero matrix included)."""
    evals, evecs = np.linalg.eigh(cov)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def mi_variance(
    fit_fn,
    model: CalibrationModel,
    x_star,
    z=None,
    M: int = 25,
    rng_seed=None,
    method: str = "parametric",
    calibration_rows=None,
) -> MiCombineResult:
    """Propagate calibration-coefficient uncertainty through M refits.

    fit_fn(xhat) must return (coefficients, variances, converged) for one
    imputed exposure column and be deterministic. method="parametric" draws
    delta ~ Normal(delta_hat, delta_cov); method="bootstrap" refits the
    calibration model on resampled subset rows passed as calibration_rows
    = (x_double_star, x_star, z). Non-convergent refits are dropped with a
    warning, flagged when more than 10% fail.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    if method not in ("parametric", "bootstrap"):
        raise ValueError(f"unknown imputation method: {method!r}")
    if method == "bootstrap" and calibration_rows is None:
        raise ValueError("bootstrap imputation needs calibration_rows")

    root = (rng_seed if isinstance(rng_seed, np.random.SeedSequence)
            else np.random.SeedSequence(rng_seed))
    streams = [np.random.default_rng(s) for s in root.spawn(M)]
    factor = _psd_factor(model.delta_cov) if method == "parametric" else None

    per_imputation = []
    estimates, variances = [], []
    n_failed = 0
    for m in range(M):
        rng = streams[m]
        if method == "parametric":
            delta_m = model.delta + factor @ rng.standard_normal(len(model.delta))
            model_m = CalibrationModel(
                delta_m, model.delta_cov, model.residual_variance,
                model.design_info, model.n_obs,
            )
        else:
            xd, xs, zc = calibration_rows
            idx = rng.integers(0, len(xs), size=len(xs))
            model_m = fit_calibration(
                np.asarray(xd)[idx],
                np.asarray(xs)[idx],
                None if zc is None else np.asarray(zc)[idx],
                column_names=model.design_info,
            )
        xhat = predict_xhat(model_m, x_star, z)
        beta_m, var_m, converged = fit_fn(xhat)
        per_imputation.append((np.asarray(beta_m, dtype=float),
                               np.asarray(var_m, dtype=float), bool(converged)))
        if converged:
            estimates.append(np.asarray(beta_m, dtype=float))
            variances.append(np.asarray(var_m, dtype=float))
        else:
            n_failed += 1

    if not estimates:
        raise DataError("all imputation refits failed to converge")
    if n_failed:
        warnings.warn(
            f"{n_failed} of {M} imputation refits did not converge and were excluded",
            stacklevel=2,
        )

    est = np.vstack(estimates)
    var = np.vstack(variances)
    point = np.median(est, axis=0)
    mad = _MAD_SCALE * np.median(np.abs(est - point), axis=0)
    se = np.sqrt(np.median(var, axis=0) + mad * mad)
    return MiCombineResult(
        point_estimate=point,
        se=se,
        M=M,
        per_imputation=tuple(per_imputation),
        n_failed=n_failed,
        high_failure_rate=n_failed > 0.1 * M,
    )


def read_calibration_csv(path):
    """Read a calibration subset: columns id, x_star, x_double_star, z1..zq.

    Returns (ids, x_star, x_double_star, z or None, z_names).
    """
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        fields = [f.strip() for f in reader.fieldnames]
        for required in ("id", "x_star", "x_double_star"):
            if required not in fields:
                raise DataError(f"{path}: missing required column {required!r}")
        z_names = [f for f in fields if f not in ("id", "x_star", "x_double_star")]
        ids, xs, xd, zrows = [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            try:
                ids.append(row["id"].strip())
                xs.append(float(row["x_star"]))
                xd.append(float(row["x_double_star"]))
                zrows.append([float(row[name]) for name in z_names])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad value ({exc})", row=rownum) from exc
    z = np.asarray(zrows) if z_names else None
    return ids, np.asarray(xs), np.asarray(xd), z, tuple(z_names)
