"""Optimizer behavior, covariance paths, and survey sandwich properties."""

import math

import numpy as np
import pytest

from auglik import (
    Dataset,
    FitOptions,
    FitResult,
    MisclassSpec,
    ParamVector,
    SimDesign,
    SubjectRecord,
    SurveyDesign,
    VisitSchedule,
    c_row,
    d_row_from_c,
    fit,
    finite_difference_hessian,
    generate_srs,
    generate_survey,
    hessian_covariance,
    loglik_total,
    pack_dataset,
    sandwich_covariance,
    score_subject,
    survival_to_lam,
)
from auglik.errors import ConfigError, DesignError

LOG15 = math.log(1.5)


def srs_dataset(n=2500, seed=42, mr=0.2):
    design = SimDesign(
        n_target=n, j_visits=4, gs_visit=4, beta=(LOG15,), lambda_b=0.17,
        covariate_law={"kind": "gamma", "shape": 0.2, "scale": 1.0},
        sensitivity=0.8, specificity=0.9, mr=mr, replicates=1, seed=seed,
    )
    return generate_srs(design)


def survey_dataset(n=800, seed=9):
    design = SimDesign(
        n_target=n, j_visits=4, gs_visit=4, beta=(LOG15,), lambda_b=0.17,
        covariate_law={"kind": "stratified_gamma"},
        sensitivity=0.8, specificity=0.9, mr=0.1, replicates=1, seed=seed,
        survey={"superpopulation": 4000, "bg_per_stratum": 10, "bg_sampled": 5},
    )
    return generate_survey(design)


class TestFitOptions:
    def test_defaults(self):
        opts = FitOptions()
        assert opts.tol == 1e-7
        assert opts.max_iter == 500
        assert opts.initsurv == 0.1

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError, match="unknown fit option"):
            FitOptions.from_dict({"tolerance": 1e-6})

    def test_dict_round_trip(self):
        opts = FitOptions(beta_start=(0.1,), tol=1e-9)
        assert FitOptions.from_dict(opts.to_dict()) == opts


class TestSurveyDesign:
    def test_length_mismatch(self):
        with pytest.raises(DesignError, match="mismatched"):
            SurveyDesign(strata=["a"], clusters=["c", "c"], weights=[1.0, 1.0])

    def test_cluster_in_two_strata(self):
        with pytest.raises(DesignError, match="appears in strata"):
            SurveyDesign(strata=["a", "b"], clusters=["c", "c"], weights=[1.0, 1.0])

    def test_from_dataset_defaults(self):
        ds = srs_dataset(n=50, seed=1)
        d = SurveyDesign.from_dataset(ds)
        assert set(d.strata) == {0}
        assert len(set(d.clusters)) == 50
        np.testing.assert_array_equal(d.weights, np.ones(50))

    def test_cluster_totals_grouping(self):
        d = SurveyDesign(
            strata=["a", "a", "a", "b"],
            clusters=["c1", "c1", "c2", "c3"],
            weights=[1.0, 1.0, 1.0, 1.0],
        )
        rows = np.array([[1.0], [2.0], [10.0], [5.0]])
        totals = d.cluster_totals(rows)
        np.testing.assert_array_equal(np.sort(totals["a"].ravel()), [3.0, 10.0])
        np.testing.assert_array_equal(totals["b"], [[5.0]])


class TestFit:
    def test_recovery_and_diagnostics(self):
        ds = srs_dataset()
        result = fit(ds)
        assert result.converged
        assert result.final_gradient_norm <= 1e-7
        assert result.cov_kind == "hessian_inverse"
        assert result.influence is None
        se = result.beta_se()[0]
        assert abs(result.beta[0] - LOG15) <= 3.5 * se
        surv = result.survival
        assert surv[0] == 1.0 and np.all(np.diff(surv) < 0)
        assert np.all(np.asarray(result.params.lam)[1:] >= 0)

    def test_loglik_at_optimum_consistent(self):
        ds = srs_dataset(n=500, seed=3)
        result = fit(ds)
        total = loglik_total(ds, result.params)
        assert result.loglik_at_optimum == pytest.approx(total, rel=1e-12)

    def test_covariance_symmetric_nonnegative_diag(self):
        ds = srs_dataset(n=800, seed=4)
        result = fit(ds)
        cov = result.full_cov
        np.testing.assert_allclose(cov, cov.T, atol=1e-18)
        assert np.all(np.diag(cov) >= 0)

    def test_determinism(self):
        ds = srs_dataset(n=600, seed=5)
        r1, r2 = fit(ds), fit(ds)
        assert r1.params == r2.params
        np.testing.assert_array_equal(r1.full_cov, r2.full_cov)
        assert r1.iterations == r2.iterations

    def test_hessian_covariance_matches_fit(self):
        ds = srs_dataset(n=600, seed=6)
        result = fit(ds)
        cov = hessian_covariance(ds, result.params)
        np.testing.assert_allclose(cov, result.full_cov, rtol=1e-10, atol=1e-14)

    def test_packed_reuse_identical(self):
        ds = srs_dataset(n=400, seed=7)
        packed = pack_dataset(ds)
        assert fit(ds, packed=packed).params == fit(ds).params

    def test_covariate_override(self):
        ds = srs_dataset(n=400, seed=8)
        x = np.array([s.covariates for s in ds.subjects])
        assert fit(ds, covariates=x).params == fit(ds).params

    def test_custom_start_same_optimum(self):
        ds = srs_dataset(n=600, seed=10)
        base = fit(ds)
        moved = fit(ds, options=FitOptions(beta_start=(0.0,),
                                           lam_start=tuple(survival_to_lam(
                                               [1.0, 0.9, 0.7, 0.5, 0.3]))))
        np.testing.assert_allclose(
            moved.params.as_array(), base.params.as_array(), atol=1e-6
        )

    def test_bad_start_lengths(self):
        ds = srs_dataset(n=100, seed=11)
        with pytest.raises(ConfigError, match="beta_start"):
            fit(ds, options=FitOptions(beta_start=(0.1, 0.2)))
        with pytest.raises(ConfigError, match="lam_start"):
            fit(ds, options=FitOptions(lam_start=(0.1,)))

    def test_nonconvergence_reported_honestly(self):
        ds = srs_dataset(n=1500, seed=12)
        result = fit(ds, options=FitOptions(max_iter=2))
        assert not result.converged
        assert result.final_gradient_norm > 1e-7

    def test_design_row_mismatch(self):
        ds = srs_dataset(n=100, seed=13)
        bad = SurveyDesign(strata=[0] * 99, clusters=list(range(99)), weights=[1.0] * 99)
        with pytest.raises(DesignError, match="99 rows"):
            fit(ds, design=bad)

    def test_weight_neutrality(self):
        # all-ones weights with singleton clusters: same point estimate as
        # the unweighted fit, only the covariance flavor changes
        ds = srs_dataset(n=500, seed=14)
        plain = fit(ds)
        surveyed = fit(ds, design=SurveyDesign.from_dataset(ds))
        assert plain.params == surveyed.params
        assert surveyed.cov_kind == "survey_sandwich"
        assert surveyed.influence.shape == (500, 5)

    def test_beta_se_unavailable_raises(self):
        result = FitResult(
            params=ParamVector(beta=(0.0,), lam=(0.1,)),
            survival=np.array([1.0, 0.9]),
            beta_cov=None, full_cov=None, cov_kind="hessian_inverse",
            influence=None, converged=True, iterations=3,
            final_gradient_norm=0.0, loglik_at_optimum=-1.0,
            cov_message="negative Hessian is not positive definite",
        )
        with pytest.raises(ValueError, match="not positive definite"):
            result.beta_se()


class TestFiniteDifferenceHessian:
    def test_quadratic_oracle(self):
        rng = np.random.default_rng(21)
        a = rng.normal(size=(4, 4))
        a = a + a.T
        b = rng.normal(size=4)
        hess = finite_difference_hessian(lambda x: a @ x + b, rng.normal(size=4))
        np.testing.assert_allclose(hess, a, atol=1e-6)

    def test_one_sided_at_bound(self):
        a = np.diag([2.0, 3.0])
        hess = finite_difference_hessian(
            lambda x: a @ x, np.array([0.5, 0.0]), lower_bounds=np.array([-np.inf, 0.0])
        )
        np.testing.assert_allclose(hess, a, atol=1e-6)


class TestFisherInformation:
    def test_current_status_binomial_variance(self):
        # gold standard only, no covariates, one interval: the lam variance
        # has the closed binomial form p(1-p) / (n (s log s)^2)
        n, k = 500, 180
        subjects = [
            SubjectRecord(id=i, aux_results=(), aux_visit_indices=(),
                          gs_visit_index=1, gs_status=int(i < k), covariates=())
            for i in range(n)
        ]
        ds = Dataset(schedule=VisitSchedule.annual(1), subjects=tuple(subjects),
                     misclass=MisclassSpec(0.8, 0.9))
        result = fit(ds)
        p = k / n
        s = 1.0 - p
        assert result.params.lam[0] == pytest.approx(math.log(-math.log(s)), abs=1e-6)
        want = p * (1 - p) / (n * (s * math.log(s)) ** 2)
        assert result.full_cov[0, 0] == pytest.approx(want, rel=1e-4)


class TestSandwich:
    def test_singleton_clusters_match_classical_robust(self):
        ds = srs_dataset(n=800, seed=30, mr=0.15)
        design = SurveyDesign.from_dataset(ds)
        result = fit(ds, design=design)
        assert result.converged and not result.boundary_lam_indices

        x_hat = result.params.as_array()
        rows = []
        for subj in ds.subjects:
            dm = d_row_from_c(c_row(subj, ds.schedule, ds.misclass))
            rows.append(score_subject(subj, result.params, dm))
        u = np.array(rows)

        def total_score(x):
            params = ParamVector.from_array(x, 1)
            return sum(
                score_subject(s, params, d_row_from_c(c_row(s, ds.schedule, ds.misclass)))
                for s in ds.subjects
            )

        neg_hess = -finite_difference_hessian(total_score, x_hat)
        bread = np.linalg.inv(neg_hess)
        infl = u @ bread.T
        centered = infl - infl.mean(axis=0)
        n = len(ds.subjects)
        classical = (n / (n - 1.0)) * centered.T @ centered
        scale = np.abs(classical).max()
        assert np.abs(result.full_cov - classical).max() <= 1e-8 * scale

    def test_weight_scale_equivariance(self):
        ds = survey_dataset()
        base_design = SurveyDesign.from_dataset(ds)
        scaled = SurveyDesign(
            strata=base_design.strata,
            clusters=base_design.clusters,
            weights=base_design.weights * 7.3,
        )
        r1 = fit(ds, design=base_design)
        r2 = fit(ds, design=scaled)
        np.testing.assert_allclose(
            r1.params.as_array(), r2.params.as_array(), atol=1e-8
        )
        np.testing.assert_allclose(r1.full_cov, r2.full_cov, rtol=1e-6)

    def test_design_weights_override_record_weights(self):
        # the design's weight vector is authoritative even when the subject
        # records carry different weights
        ds = srs_dataset(n=300, seed=31)
        rng = np.random.default_rng(0)
        w = rng.uniform(0.5, 3.0, size=300)
        design = SurveyDesign(strata=[0] * 300, clusters=list(range(300)), weights=w)
        reweighted = fit(ds, design=design)
        plain = fit(ds)
        assert not np.allclose(reweighted.beta, plain.beta, atol=1e-10)

    def test_singleton_stratum_named(self):
        design = SurveyDesign(
            strata=["a", "a", "b"], clusters=["c1", "c2", "c3"], weights=np.ones(3)
        )
        with pytest.raises(DesignError, match="stratum 'b'"):
            sandwich_covariance(np.ones((3, 2)), design)

    def test_duplicated_clusters_halve_the_meat(self):
        # two equal rows per cluster: splitting each cluster into twins turns
        # totals 2r_i into pairs (r_i, r_i), so the de-factored spread halves
        rng = np.random.default_rng(40)
        infl = np.repeat(rng.normal(size=(3, 2)), 2, axis=0)
        base = SurveyDesign(
            strata=["a"] * 6, clusters=[0, 0, 1, 1, 2, 2], weights=np.ones(6)
        )
        twin = SurveyDesign(
            strata=["a"] * 6, clusters=[0, 3, 1, 4, 2, 5], weights=np.ones(6)
        )
        v_base = sandwich_covariance(infl, base) / (3 / 2)
        v_twin = sandwich_covariance(infl, twin) / (6 / 5)
        np.testing.assert_allclose(v_twin, v_base / 2, atol=1e-12)


class TestBoundary:
    def make_gap_dataset(self):
        # perfect reports with no interval-2 events: lam_2 sits at its bound
        rng = np.random.default_rng(50)
        counts = {1: 25, 3: 20, 4: 30}
        subjects = []
        sid = 0
        for interval, n_sub in counts.items():
            for _ in range(n_sub):
                if interval <= 3:
                    res = [0] * (interval - 1) + [1]
                    idx = list(range(1, interval + 1))
                else:
                    res = [0, 0, 0]
                    idx = [1, 2, 3]
                subjects.append(SubjectRecord(
                    id=sid, aux_results=tuple(res), aux_visit_indices=tuple(idx),
                    gs_visit_index=3, gs_status=None,
                    covariates=(float(rng.normal(0, 0.3)),),
                ))
                sid += 1
        return Dataset(schedule=VisitSchedule.annual(3), subjects=tuple(subjects),
                       misclass=MisclassSpec(1.0, 1.0))

    def test_active_bound_reported_and_masked(self):
        result = fit(self.make_gap_dataset())
        assert result.converged
        assert 2 in result.boundary_lam_indices
        # boundary coordinate: beta occupies column 0, lam_2 column 2
        assert np.isnan(result.full_cov[2]).all()
        assert np.isnan(result.full_cov[:, 2]).all()
        finite = [(0, 0), (1, 1), (3, 3)]
        for i, j in finite:
            assert np.isfinite(result.full_cov[i, j])
        assert np.isfinite(result.beta_se()[0])
