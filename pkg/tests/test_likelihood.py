"""Likelihood construction: C/D rows, survival maps, branch values, scores."""

import math

import numpy as np
import pytest

from auglik import (
    Dataset,
    MisclassSpec,
    ParamVector,
    SubjectRecord,
    VisitSchedule,
    c_row,
    d_row_from_c,
    default_lam,
    lam_to_survival,
    loglik_subject,
    loglik_total,
    pack_dataset,
    score_subject,
    survival_from_theta,
    survival_to_lam,
    theta_from_survival,
)
from auglik.errors import DegenerateLikelihoodError


def subject(results, indices, gs_visit=4, gs_status=None, x=(0.5,), **kw):
    return SubjectRecord(
        id=kw.pop("id", 0),
        aux_results=tuple(results),
        aux_visit_indices=tuple(indices),
        gs_visit_index=gs_visit,
        gs_status=gs_status,
        covariates=tuple(x),
        **kw,
    )


def random_instance(rng, j_max=5):
    """One (subject, params, misclass, schedule) draw covering all branches."""
    j = int(rng.integers(1, j_max + 1))
    schedule = VisitSchedule.annual(j)
    se = float(rng.uniform(0.55, 0.95))
    sp = float(rng.uniform(0.75, 0.99))
    n_rep = int(rng.integers(0, j + 1))
    visits = np.sort(rng.choice(np.arange(1, j + 1), size=n_rep, replace=False))
    results = rng.integers(0, 2, size=n_rep)
    keep = []
    for k, y in zip(visits, results):
        keep.append((int(k), int(y)))
        if y == 1:
            break
    idx = tuple(k for k, _ in keep)
    res = tuple(y for _, y in keep)
    gs_visit = int(rng.integers(1, j + 1))
    gs_status = [None, 0, 1][int(rng.integers(0, 3))]
    x = tuple(rng.normal(0, 0.7, size=int(rng.integers(1, 3))))
    subj = subject(res, idx, gs_visit=gs_visit, gs_status=gs_status, x=x)
    surv_body = np.sort(rng.uniform(0.05, 0.95, size=j))[::-1]
    lam = survival_to_lam(np.concatenate([[1.0], surv_body]))
    beta = rng.normal(0, 0.5, size=len(x))
    params = ParamVector(beta=tuple(beta), lam=tuple(lam))
    return subj, params, MisclassSpec(se, sp), schedule


def enumerate_loglik(subj, params, misclass, schedule):
    """Direct branch sum over intervals, no D-matrix shortcut."""
    c = c_row(subj, schedule, misclass)
    surv = np.append(lam_to_survival(np.asarray(params.lam)), 0.0)
    eta = math.exp(float(np.dot(subj.covariates, params.beta)))
    theta_x = surv[:-1] ** eta - surv[1:] ** eta
    j_plus = len(c)
    v = subj.gs_visit_index
    if subj.gs_status == 1:
        cols = range(v)
    elif subj.gs_status == 0:
        cols = range(v, j_plus)
    else:
        cols = range(j_plus)
    return math.log(sum(c[j] * theta_x[j] for j in cols))


class TestCRow:
    def test_closed_form_example(self):
        subj = subject([0, 0, 0, 1], [1, 2, 3, 4])
        row = c_row(subj, VisitSchedule.annual(4), MisclassSpec(0.8, 0.9))
        np.testing.assert_allclose(
            row, [0.0064, 0.0288, 0.1296, 0.5832, 0.0729], rtol=0, atol=1e-15
        )

    def test_closed_forms_all_first_positive_positions(self):
        # no missed visits, reports 0..0,1 up to visit m: the five-pattern
        # closed forms Se(1-Se)^{m-1}...Sp^{m-1}(1-Sp) hold for each m
        se, sp = 0.8, 0.9
        j = 4
        for m in range(1, j + 1):
            subj = subject([0] * (m - 1) + [1], range(1, m + 1))
            row = c_row(subj, VisitSchedule.annual(j), MisclassSpec(se, sp))
            for col in range(1, j + 2):
                if col <= m:
                    expect = se * (1 - se) ** (m - col) * sp ** (col - 1)
                else:
                    expect = sp ** (m - 1) * (1 - sp)
                assert row[col - 1] == pytest.approx(expect, abs=1e-15)

    def test_no_reports_all_ones(self):
        subj = subject([], [])
        row = c_row(subj, VisitSchedule.annual(4), MisclassSpec(0.8, 0.9))
        np.testing.assert_array_equal(row, np.ones(5))

    def test_perfect_classification_pins_interval(self):
        subj = subject([0, 1], [1, 2], gs_visit=2)
        row = c_row(subj, VisitSchedule.annual(2), MisclassSpec(1.0, 1.0))
        np.testing.assert_array_equal(row, [0.0, 1.0, 0.0])

    def test_entries_within_unit_interval(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            subj, _params, mc, sched = random_instance(rng)
            row = c_row(subj, sched, mc)
            assert np.all(row >= 0) and np.all(row <= 1)

    def test_missed_visits_drop_factors(self):
        # a gap at visit 2 must equal the product over the two observed reports
        mc = MisclassSpec(0.8, 0.9)
        sched = VisitSchedule.annual(3)
        row = c_row(subject([0, 1], [1, 3]), sched, mc)
        expect = np.array([
            (1 - 0.8) * 0.8,
            0.9 * 0.8,
            0.9 * 0.8,
            0.9 * (1 - 0.9),
        ])
        np.testing.assert_allclose(row, expect, atol=1e-15)

    def test_d_row_is_adjacent_difference(self):
        c = np.array([0.0064, 0.0288, 0.1296, 0.5832, 0.0729])
        d = d_row_from_c(c)
        np.testing.assert_allclose(np.cumsum(d), c, atol=1e-15)
        assert d[0] == c[0]


class TestSurvivalMaps:
    def test_theta_example(self):
        np.testing.assert_allclose(
            theta_from_survival([1.0, 0.8, 0.5]), [0.2, 0.3, 0.5], atol=1e-15
        )

    def test_theta_tiny_survival_sums_to_one(self):
        eps = 1e-9
        theta = theta_from_survival([1.0, eps, eps / 2])
        assert math.fsum(theta.tolist()) == pytest.approx(1.0, abs=1e-15)

    def test_theta_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            j = int(rng.integers(1, 8))
            body = np.sort(rng.uniform(0.01, 0.99, size=j))[::-1]
            surv = np.concatenate([[1.0], body])
            back = survival_from_theta(theta_from_survival(surv))
            np.testing.assert_allclose(back, surv, atol=1e-12)

    def test_theta_rejects_disordered(self):
        with pytest.raises(ValueError):
            theta_from_survival([1.0, 0.5, 0.8])
        with pytest.raises(ValueError):
            theta_from_survival([0.9, 0.5, 0.2])

    def test_lam_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            j = int(rng.integers(1, 8))
            body = np.sort(rng.uniform(0.01, 0.99, size=j))[::-1]
            surv = np.concatenate([[1.0], body])
            lam = survival_to_lam(surv)
            assert np.all(lam[1:] >= 0)
            np.testing.assert_allclose(lam_to_survival(lam), surv, atol=1e-12)

    def test_default_lam_spacing(self):
        surv = lam_to_survival(default_lam(4, initsurv=0.1))
        np.testing.assert_allclose(surv, np.linspace(1.0, 0.1, 5), atol=1e-12)

    def test_nonnegative_lam_tail_orders_survival(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            lam = np.concatenate([rng.normal(-0.5, 0.5, 1), rng.uniform(0, 0.5, 4)])
            surv = lam_to_survival(lam)
            assert np.all(np.diff(surv) < 0)

    def test_underflowed_survival_floored_not_zero(self):
        surv = lam_to_survival([5.0, 5.0, 5.0])
        assert np.all(surv > 0)


class TestLoglikSubject:
    def params_from_theta(self, theta, beta=()):
        surv = survival_from_theta(np.asarray(theta))
        return ParamVector(beta=tuple(beta), lam=tuple(survival_to_lam(surv)))

    def loglik(self, subj, params, mc, sched):
        dm = d_row_from_c(c_row(subj, sched, mc))
        return loglik_subject(subj, params, dm)

    def test_perfect_report_pins_first_interval(self):
        subj = subject([1], [1], gs_visit=1, x=())
        params = self.params_from_theta([0.3, 0.7])
        value = self.loglik(subj, params, MisclassSpec(1.0, 1.0), VisitSchedule.annual(1))
        assert value == pytest.approx(math.log(0.3), abs=1e-12)

    def test_current_status_probability(self):
        subj = subject([], [], gs_visit=1, gs_status=1, x=())
        params = ParamVector(beta=(), lam=tuple(survival_to_lam([1.0, 0.6])))
        value = self.loglik(subj, params, MisclassSpec(0.8, 0.9), VisitSchedule.annual(1))
        assert value == pytest.approx(math.log(0.4), abs=1e-12)

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(77)
        for _ in range(300):
            subj, params, mc, sched = random_instance(rng)
            dm = d_row_from_c(c_row(subj, sched, mc))
            got = loglik_subject(subj, params, dm)
            want = enumerate_loglik(subj, params, mc, sched)
            assert got == pytest.approx(want, abs=1e-12 * max(1.0, abs(want)))

    def test_likelihood_in_unit_interval(self):
        rng = np.random.default_rng(78)
        for _ in range(200):
            subj, params, mc, sched = random_instance(rng)
            dm = d_row_from_c(c_row(subj, sched, mc))
            lik = math.exp(loglik_subject(subj, params, dm))
            assert 0.0 < lik <= 1.0

    def test_branch_consistency(self):
        # P(data, event by V) + P(data, no event by V) = P(data): the missing
        # gold-standard branch is the total over the two observed ones
        rng = np.random.default_rng(79)
        for _ in range(200):
            subj, params, mc, sched = random_instance(rng)
            dm = d_row_from_c(c_row(subj, sched, mc))
            import dataclasses

            l1 = math.exp(loglik_subject(dataclasses.replace(subj, gs_status=1), params, dm))
            l0 = math.exp(loglik_subject(dataclasses.replace(subj, gs_status=0), params, dm))
            lm = math.exp(loglik_subject(dataclasses.replace(subj, gs_status=None), params, dm))
            assert l1 + l0 == pytest.approx(lm, abs=1e-12)

    def test_d_matrix_identity(self):
        # the coefficient form D.P equals the direct sum C.theta at eta = 1
        rng = np.random.default_rng(80)
        for _ in range(200):
            subj, params, mc, sched = random_instance(rng)
            c = c_row(subj, sched, mc)
            d = d_row_from_c(c)
            surv = lam_to_survival(np.asarray(params.lam))
            theta = theta_from_survival(surv)
            direct = float(c @ theta)
            shortcut = float(d @ surv)
            assert shortcut == pytest.approx(direct, abs=1e-12)

    def test_perfect_classification_reduction(self):
        # Se=Sp=1 with full attendance: the missing-gs branch equals the
        # grouped-time PH likelihood of the first-positive interval
        rng = np.random.default_rng(81)
        mc = MisclassSpec(1.0, 1.0)
        for _ in range(50):
            j = int(rng.integers(2, 6))
            sched = VisitSchedule.annual(j)
            m = int(rng.integers(1, j + 2))  # j+1 means censored past the grid
            if m <= j:
                res = [0] * (m - 1) + [1]
                idx = list(range(1, m + 1))
            else:
                res = [0] * j
                idx = list(range(1, j + 1))
            x = (float(rng.normal(0, 0.5)),)
            subj = subject(res, idx, gs_visit=j, gs_status=None, x=x)
            body = np.sort(rng.uniform(0.05, 0.95, size=j))[::-1]
            surv = np.concatenate([[1.0], body])
            beta = (float(rng.normal(0, 0.5)),)
            params = ParamVector(beta=beta, lam=tuple(survival_to_lam(surv)))
            eta = math.exp(beta[0] * x[0])
            full = np.append(surv, 0.0)
            want = math.log(full[m - 1] ** eta - full[m] ** eta)
            dm = d_row_from_c(c_row(subj, sched, mc))
            assert loglik_subject(subj, params, dm) == pytest.approx(want, abs=1e-12)

    def test_monotone_beta_decreases_censored_likelihood(self):
        subj = subject([0, 0, 0, 0], [1, 2, 3, 4], gs_status=None, x=(1.3,))
        sched = VisitSchedule.annual(4)
        mc = MisclassSpec(1.0, 1.0)
        dm = d_row_from_c(c_row(subj, sched, mc))
        lam = tuple(default_lam(4))
        values = [
            loglik_subject(subj, ParamVector(beta=(b,), lam=lam), dm)
            for b in (-0.5, 0.0, 0.5, 1.0)
        ]
        assert all(v2 < v1 for v1, v2 in zip(values, values[1:]))

    def test_degenerate_contradiction_names_subject(self):
        # Sp=1, a positive report, and a negative gold standard cannot coexist
        subj = subject([1], [1], gs_visit=2, gs_status=0, x=(0.5,), id="bad-one")
        ds = Dataset(
            schedule=VisitSchedule.annual(2),
            subjects=(subj,),
            misclass=MisclassSpec(0.8, 1.0),
        )
        with pytest.raises(DegenerateLikelihoodError, match="bad-one"):
            pack_dataset(ds)


class TestLoglikTotal:
    def make_dataset(self, subjects, j=4, se=0.8, sp=0.9):
        return Dataset(
            schedule=VisitSchedule.annual(j),
            subjects=tuple(subjects),
            misclass=MisclassSpec(se, sp),
        )

    def test_additivity(self):
        s1 = subject([0, 1], [1, 2], gs_status=1, id=1)
        s2 = subject([0, 1], [1, 2], gs_status=1, id=2)
        ds = self.make_dataset([s1, s2])
        params = ParamVector(beta=(0.3,), lam=tuple(default_lam(4)))
        dm = d_row_from_c(c_row(s1, ds.schedule, ds.misclass))
        single = loglik_subject(s1, params, dm)
        assert loglik_total(ds, params) == pytest.approx(2 * single, abs=1e-12)

    def test_weight_three_equals_three_copies(self):
        heavy = subject([0, 0, 1], [1, 2, 3], gs_status=1, id=1, weight=3.0)
        copies = [
            subject([0, 0, 1], [1, 2, 3], gs_status=1, id=i, weight=1.0)
            for i in range(3)
        ]
        params = ParamVector(beta=(0.3,), lam=tuple(default_lam(4)))
        weighted = loglik_total(self.make_dataset([heavy]), params, weights_mode="survey")
        plain = loglik_total(self.make_dataset(copies), params)
        assert weighted == pytest.approx(plain, abs=1e-12)

    def test_unweighted_mode_ignores_weights(self):
        heavy = subject([0, 1], [1, 2], gs_status=1, id=1, weight=3.0)
        light = subject([0, 1], [1, 2], gs_status=1, id=1, weight=1.0)
        params = ParamVector(beta=(0.3,), lam=tuple(default_lam(4)))
        assert loglik_total(self.make_dataset([heavy]), params) == loglik_total(
            self.make_dataset([light]), params
        )

    def test_summation_oracle(self):
        rng = np.random.default_rng(200)
        subjects = []
        mc = MisclassSpec(0.7, 0.92)
        sched = VisitSchedule.annual(4)
        for i in range(200):
            s, *_ = random_instance(rng, j_max=4)
            pad = subject(
                s.aux_results,
                s.aux_visit_indices,
                gs_visit=s.gs_visit_index,
                gs_status=s.gs_status,
                x=(s.covariates[0],),
                id=i,
            )
            subjects.append(pad)
        ds = Dataset(schedule=sched, subjects=tuple(subjects), misclass=mc)
        params = ParamVector(beta=(0.25,), lam=tuple(default_lam(4)))
        per_subject = [
            loglik_subject(s, params, d_row_from_c(c_row(s, sched, mc)))
            for s in ds.subjects
        ]
        from decimal import Decimal

        oracle = float(sum(Decimal(v) for v in per_subject))
        got = loglik_total(ds, params)
        assert got == pytest.approx(oracle, rel=1e-10)

    def test_bad_mode_rejected(self):
        ds = self.make_dataset([subject([0, 1], [1, 2], gs_status=1)])
        params = ParamVector(beta=(0.0,), lam=tuple(default_lam(4)))
        with pytest.raises(ValueError, match="weights_mode"):
            loglik_total(ds, params, weights_mode="wat")


class TestScore:
    def fd_score(self, subj, params, dm, h=1e-6):
        x0 = params.as_array()
        nb = params.n_beta
        out = np.empty_like(x0)
        for k in range(len(x0)):
            hi, lo = x0.copy(), x0.copy()
            hi[k] += h
            lo[k] -= h
            fp = loglik_subject(subj, ParamVector.from_array(hi, nb), dm)
            fm = loglik_subject(subj, ParamVector.from_array(lo, nb), dm)
            out[k] = (fp - fm) / (2 * h)
        return out

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(90)
        for _ in range(150):
            subj, params, mc, sched = random_instance(rng)
            dm = d_row_from_c(c_row(subj, sched, mc))
            ana = score_subject(subj, params, dm)
            fd = self.fd_score(subj, params, dm)
            err = np.abs(ana - fd) / np.maximum(1.0, np.abs(fd))
            assert err.max() <= 1e-5

    def test_beta_block_zero_when_x_zero(self):
        subj = subject([0, 1], [1, 2], gs_status=1, x=(0.0,))
        sched = VisitSchedule.annual(4)
        mc = MisclassSpec(0.8, 0.9)
        dm = d_row_from_c(c_row(subj, sched, mc))
        params = ParamVector(beta=(0.4,), lam=tuple(default_lam(4)))
        assert score_subject(subj, params, dm)[0] == 0.0

    def test_total_score_vanishes_at_multinomial_mle(self):
        # perfect reports, no covariates: the maximizer is the empirical
        # interval distribution, so the summed score must be ~0 there
        counts = (5, 3, 2, 4)
        j = 3
        sched = VisitSchedule.annual(j)
        mc = MisclassSpec(1.0, 1.0)
        subjects = []
        sid = 0
        for interval, n_sub in enumerate(counts, start=1):
            for _ in range(n_sub):
                if interval <= j:
                    res = [0] * (interval - 1) + [1]
                    idx = list(range(1, interval + 1))
                else:
                    res = [0] * j
                    idx = list(range(1, j + 1))
                subjects.append(subject(res, idx, gs_visit=j, gs_status=None, x=(), id=sid))
                sid += 1
        theta_hat = np.asarray(counts) / sum(counts)
        lam_hat = survival_to_lam(survival_from_theta(theta_hat))
        params = ParamVector(beta=(), lam=tuple(lam_hat))
        total = np.zeros(j)
        for s in subjects:
            dm = d_row_from_c(c_row(s, sched, mc))
            total += score_subject(s, params, dm)
        assert np.abs(total).max() <= 1e-6
