"""Augmented log-likelihood for discrete proportional hazards with error-prone
outcome reports and a once-observed gold standard.

Per subject, every report sequence is summarized by a row of the C matrix:
C_j = product over observed reports of the probability of that report given the
event happened in interval j. The D row is the C row pushed through the linear
map theta = R.S (D_j = C_j - C_{j-1}), which lets each likelihood branch be
written as a short linear combination of powered baseline survivals
P_j = S_j^eta, eta = exp(x'beta):

    gold standard positive at visit V:  sum_{j<=V} C_j (P_j - P_{j+1})
                                      = sum_{j<=V} D_j P_j - C_V P_{V+1}
    gold standard negative at visit V:  sum_{j>V} C_j (P_j - P_{j+1})
                                      = C_{V+1} P_{V+1} + sum_{j>=V+2} D_j P_j
    gold standard missing:              sum_j D_j P_j

(the convention P_{J+2} = 0 closes the last interval). Log-likelihood values
are accumulated from the first, all-nonnegative form; scores use the second,
coefficient form, whose lam-derivatives are reverse cumulative sums.

Baseline survival is reparameterized as lam_1 = loglog S_2,
lam_k = loglog S_{k+1} - loglog S_k (loglog x = log(-log x)), so lam_k >= 0 for
k >= 2 keeps S strictly decreasing while lam_1 ranges freely.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset, MisclassSpec, SubjectRecord, VisitSchedule
from .errors import DegenerateLikelihoodError

__all__ = [
    "ParamVector",
    "lam_to_survival",
    "survival_to_lam",
    "default_lam",
    "theta_from_survival",
    "survival_from_theta",
    "c_row",
    "d_row_from_c",
    "loglik_subject",
    "score_subject",
    "loglik_total",
]

# Smallest positive normal double; per-subject likelihoods are floored here so
# transient underflow at extreme trial parameters stays finite.
_TINY = float(np.finfo(np.float64).tiny)
_XB_LIMIT = 500.0  # keeps exp(x'beta) finite; far beyond any sane fit region


@dataclass(frozen=True)
class ParamVector:
    """Free parameters: beta (length p) and lam (length J)."""

    beta: tuple[float, ...]
    lam: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))

    @property
    def n_beta(self) -> int:
        return len(self.beta)

    @property
    def n_lam(self) -> int:
        return len(self.lam)

    def survival(self) -> np.ndarray:
        """Baseline survival vector (S_1=1, ..., S_{J+1})."""
        return lam_to_survival(np.asarray(self.lam))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beta, self.lam])

    @classmethod
    def from_array(cls, values, n_beta: int) -> "ParamVector":
        values = np.asarray(values, dtype=float)
        return cls(beta=tuple(values[:n_beta]), lam=tuple(values[n_beta:]))


def lam_to_survival(lam) -> np.ndarray:
    """(lam_1..lam_J) -> (S_1=1, S_2, ..., S_{J+1}), floored at the smallest normal."""
    lam = np.asarray(lam, dtype=float)
    loglog = np.cumsum(lam)
    surv = np.exp(-np.exp(loglog))
    return np.concatenate([[1.0], np.maximum(surv, _TINY)])


def survival_to_lam(survival) -> np.ndarray:
    """Inverse of lam_to_survival (drops the leading S_1 = 1)."""
    survival = np.asarray(survival, dtype=float)
    body = survival[1:] if survival[0] == 1.0 else survival
    if np.any(body <= 0) or np.any(body >= 1):
        raise ValueError("survival values must lie strictly inside (0, 1)")
    loglog = np.log(-np.log(body))
    return np.concatenate([[loglog[0]], np.diff(loglog)])


def default_lam(n_visits: int, initsurv: float = 0.1) -> np.ndarray:
    """Starting lam: survival linearly spaced from 1 down to initsurv."""
    targets = np.linspace(1.0, initsurv, n_visits + 1)[1:]
    return survival_to_lam(np.concatenate([[1.0], targets]))


def theta_from_survival(survival) -> np.ndarray:
    """Interval probabilities theta_j = S_j - S_{j+1}, theta_{J+1} = S_{J+1}."""
    survival = np.asarray(survival, dtype=float)
    if survival[0] != 1.0 or np.any(np.diff(survival) >= 0) or survival[-1] <= 0:
        raise ValueError("survival vector must satisfy 1 = S_1 > ... > S_{J+1} > 0")
    return np.concatenate([-np.diff(survival), [survival[-1]]])


def survival_from_theta(theta) -> np.ndarray:
    """Suffix sums: S_j = sum_{h >= j} theta_h."""
    theta = np.asarray(theta, dtype=float)
    return np.cumsum(theta[::-1])[::-1]


def c_row(subject: SubjectRecord, schedule: VisitSchedule, misclass: MisclassSpec) -> np.ndarray:
    """Report-probability products per candidate event interval.

    A report at visit k sees the event as already occurred for intervals
    j <= k and as not yet occurred for intervals j > k. Subjects without
    reports get an all-ones row (empty product).
    """
    n_int = schedule.n_visits + 1
    se, sp = misclass.sensitivity, misclass.specificity
    row = np.ones(n_int)
    for y, k in zip(subject.aux_results, subject.aux_visit_indices):
        row[:k] *= se if y == 1 else 1.0 - se
        row[k:] *= (1.0 - sp) if y == 1 else sp
    return row


def d_row_from_c(c_values) -> np.ndarray:
    """Apply the theta = R.S transform to a C row: D_j = C_j - C_{j-1}."""
    return np.diff(np.asarray(c_values, dtype=float), prepend=0.0)


# --- vectorized core --------------------------------------------------------


@dataclass
class _Packed:
    """Dense arrays for one dataset; the hot path for estimation."""

    cmat: np.ndarray      # (N, J+1)
    dmat: np.ndarray      # (N, J+1)
    delta: np.ndarray     # (N,) int8; -1 encodes a missing gold standard
    gs_visit: np.ndarray  # (N,) int
    xmat: np.ndarray      # (N, p)
    weights: np.ndarray   # (N,)
    ids: np.ndarray       # (N,) object
    strata: np.ndarray    # (N,) object
    clusters: np.ndarray  # (N,) object

    @property
    def n_visits(self) -> int:
        return self.cmat.shape[1] - 1

    @property
    def n_beta(self) -> int:
        return self.xmat.shape[1]

    def with_covariates(self, covariates) -> "_Packed":
        """Same outcome data, new covariate matrix (imputation refits)."""
        xmat = np.asarray(covariates, dtype=float)
        if xmat.ndim == 1:
            xmat = xmat[:, None]
        if xmat.shape[0] != self.cmat.shape[0]:
            raise ValueError(
                f"covariate override has {xmat.shape[0]} rows for "
                f"{self.cmat.shape[0]} subjects"
            )
        return dataclasses.replace(self, xmat=xmat)


def _check_structural(cmat, delta, gs_visit, ids) -> None:
    """A branch whose C entries are all zero has zero likelihood everywhere."""
    n_int = cmat.shape[1]
    cols = np.arange(n_int)[None, :]
    v = gs_visit[:, None]
    mask = np.where(
        delta[:, None] == 1, cols <= v - 1, np.where(delta[:, None] == 0, cols >= v, True)
    )
    support = np.max(np.where(mask, cmat, 0.0), axis=1)
    bad = np.nonzero(support <= 0.0)[0]
    if bad.size:
        raise DegenerateLikelihoodError(ids[bad[0]])


def pack_dataset(dataset: Dataset, covariates=None) -> _Packed:
    """Precompute C/D rows and flat arrays; raises if any subject is degenerate."""
    subs = dataset.subjects
    n = len(subs)
    n_int = dataset.schedule.n_visits + 1
    cmat = np.empty((n, n_int))
    delta = np.empty(n, dtype=np.int8)
    gs_visit = np.empty(n, dtype=np.int64)
    weights = np.empty(n)
    ids = np.empty(n, dtype=object)
    strata = np.empty(n, dtype=object)
    clusters = np.empty(n, dtype=object)
    for i, s in enumerate(subs):
        cmat[i] = c_row(s, dataset.schedule, dataset.misclass)
        delta[i] = -1 if s.gs_status is None else s.gs_status
        gs_visit[i] = s.gs_visit_index
        weights[i] = s.weight
        ids[i] = s.id
        strata[i] = s.stratum_id
        clusters[i] = s.cluster_id if s.cluster_id is not None else s.id
    if covariates is None:
        xmat = np.array([s.covariates for s in subs], dtype=float)
        if xmat.ndim == 1:  # zero covariates
            xmat = xmat.reshape(n, 0)
    else:
        xmat = np.asarray(covariates, dtype=float)
        if xmat.ndim == 1:
            xmat = xmat[:, None]
        if xmat.shape[0] != n:
            raise ValueError("covariate override has wrong number of rows")
    _check_structural(cmat, delta, gs_visit, ids)
    dmat = np.diff(cmat, prepend=0.0, axis=1)
    return _Packed(cmat, dmat, delta, gs_visit, xmat, weights, ids, strata, clusters)


def _core(packed: _Packed, beta, lam, want_score: bool):
    """Per-subject log-likelihood terms and (optionally) unweighted score rows."""
    beta = np.asarray(beta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    n_int = packed.cmat.shape[1]

    surv = lam_to_survival(lam)
    log_s = np.log(surv)
    log_s[0] = 0.0
    xb = packed.xmat @ beta if packed.n_beta else np.zeros(packed.cmat.shape[0])
    eta = np.exp(np.clip(xb, -_XB_LIMIT, _XB_LIMIT))
    powered = np.exp(eta[:, None] * log_s[None, :])  # S_j^eta, column 0 == 1

    pnext = np.empty_like(powered)
    pnext[:, :-1] = powered[:, 1:]
    pnext[:, -1] = 0.0
    theta_x = np.maximum(powered - pnext, 0.0)

    cols = np.arange(n_int)[None, :]
    v = packed.gs_visit[:, None]
    d1 = packed.delta[:, None] == 1
    d0 = packed.delta[:, None] == 0
    theta_mask = np.where(d1, cols <= v - 1, np.where(d0, cols >= v, True))

    lik = np.sum(packed.cmat * theta_x * theta_mask, axis=1)
    floored = lik < _TINY
    terms = np.log(np.maximum(lik, _TINY))
    if not want_score:
        return terms, floored, None

    coef_mask = np.where(d1, cols <= v - 1, np.where(d0, cols >= v + 1, True))
    coef = packed.dmat * coef_mask
    rows1 = np.nonzero(packed.delta == 1)[0]
    rows0 = np.nonzero(packed.delta == 0)[0]
    v1 = packed.gs_visit[rows1]
    v0 = packed.gs_visit[rows0]
    coef[rows1, v1] = -packed.cmat[rows1, v1 - 1]
    coef[rows0, v0] = packed.cmat[rows0, v0]

    # d l / d lam_m = eta * sum_{j >= m+1} coef_j P_j log S_j / L  (reverse cumsum)
    weighted = coef * (powered * log_s[None, :]) * eta[:, None]
    revcum = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1]
    inv_lik = np.where(floored, 0.0, 1.0 / np.maximum(lik, _TINY))
    score_beta = (revcum[:, 0] * inv_lik)[:, None] * packed.xmat
    score_lam = revcum[:, 1:] * inv_lik[:, None]
    return terms, floored, np.hstack([score_beta, score_lam])


def _pack_single(subject: SubjectRecord, dm_row, n_beta: int) -> _Packed:
    dm_row = np.asarray(dm_row, dtype=float)
    cmat = np.cumsum(dm_row, dtype=float)[None, :]
    delta = np.array([-1 if subject.gs_status is None else subject.gs_status], dtype=np.int8)
    gs_visit = np.array([subject.gs_visit_index], dtype=np.int64)
    xmat = np.asarray(subject.covariates, dtype=float)[None, :]
    ids = np.array([subject.id], dtype=object)
    _check_structural(cmat, delta, gs_visit, ids)
    return _Packed(
        cmat, dm_row[None, :], delta, gs_visit, xmat,
        np.array([subject.weight]), ids,
        np.array([subject.stratum_id], dtype=object),
        np.array([subject.cluster_id], dtype=object),
    )


def loglik_subject(subject: SubjectRecord, params: ParamVector, dm_row) -> float:
    """Log of the subject's branch likelihood; dm_row = d_row_from_c(c_row(...))."""
    packed = _pack_single(subject, dm_row, len(params.beta))
    terms, _floored, _ = _core(packed, params.beta, params.lam, want_score=False)
    return float(terms[0])


def score_subject(subject: SubjectRecord, params: ParamVector, dm_row) -> np.ndarray:
    """Analytic gradient of loglik_subject w.r.t. (beta, lam); unweighted."""
    packed = _pack_single(subject, dm_row, len(params.beta))
    _terms, _floored, score = _core(packed, params.beta, params.lam, want_score=True)
    return score[0]


def loglik_total(dataset: Dataset, params: ParamVector, weights_mode: str = "unweighted") -> float:
    """Sum of per-subject log-likelihoods, compensated; survey mode applies weights."""
    if weights_mode not in ("unweighted", "survey"):
        raise ValueError(f"weights_mode must be 'unweighted' or 'survey', got {weights_mode!r}")
    packed = pack_dataset(dataset)
    terms, _floored, _ = _core(packed, params.beta, params.lam, want_score=False)
    if weights_mode == "survey":
        terms = terms * packed.weights
    return math.fsum(terms.tolist())
