import warnings
from fractions import Fraction

import numpy as np
import pytest

from conftest import REF_ST, simulate
from vbsmsn.estimation import FitConfig, fit
from vbsmsn.influence import (
    filter_and_refit,
    influence_analysis,
    influence_from_scores,
    likelihood_displacement,
    normal_curvature,
    relative_change,
    score_matrix,
)
from vbsmsn.model import GrowthDataset, ModelSpec, ThetaVB, loglik, loglik_grad, loglik_terms

SMALL_TRUTH = {
    "N": (ThetaVB(35.0, 0.09, -2.5, 4.0, rho=-0.3), ModelSpec("N")),
    "SN": (ThetaVB(35.0, 0.09, -2.5, 4.0, rho=-0.3, lam=1.5), ModelSpec("SN")),
    "T": (ThetaVB(35.0, 0.09, -2.5, 4.0, rho=-0.3), ModelSpec("T", 10.0)),
    "ST": (ThetaVB(35.0, 0.09, -2.5, 4.0, rho=-0.3, lam=1.5), ModelSpec("ST", 10.0)),
}


def small_fit(family, n=50, seed=0):
    theta, spec = SMALL_TRUTH[family]
    data = simulate(theta, spec, n, seed)
    return fit(spec, data, FitConfig(n_starts=3)), data


def smooth_fits(family, count=3, n=50, seed0=100):
    """Fits with an interior optimum; a skew-normal shape on its bound is not smooth."""
    out, seed = [], seed0
    while len(out) < count:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f, data = small_fit(family, n, seed)
        if abs(f.theta_hat.lam) < 50:
            out.append((f, data))
        seed += 1
    return out


def dense_F(fit_, H):
    return H.T @ np.linalg.solve(fit_.info_matrix, H)


@pytest.fixture(scope="module")
def st_small():
    return small_fit("ST", seed=17)


class TestScoreMatrix:
    def test_row_sums_vanish_at_optimum(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        assert H.shape == (6, data.n)
        assert np.allclose(H.sum(axis=1), loglik_grad(f.theta_hat, f.spec, data), rtol=0, atol=1e-12)
        assert np.max(np.abs(H.sum(axis=1))) <= 1e-6

    def test_columns_match_finite_differences(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        x = f.theta_hat.as_array()
        for j, k in enumerate(f.free):
            h = 1e-6 * (1 + abs(x[k]))
            up, dn = x.copy(), x.copy()
            up[k] += h
            dn[k] -= h
            fd = (loglik_terms(ThetaVB.from_array(up), f.spec, data) - loglik_terms(ThetaVB.from_array(dn), f.spec, data)) / (2 * h)
            assert np.all(np.abs(H[j] - fd) <= 1e-5 * np.maximum(np.abs(fd), 1.0))

    def test_duplicate_observation_duplicates_column(self, st_small):
        f, data = st_small
        dup = GrowthDataset(np.append(data.ages, data.ages[7]), np.append(data.lengths, data.lengths[7]))
        H, Hd = score_matrix(f, data), score_matrix(f, dup)
        assert np.array_equal(Hd[:, -1], H[:, 7])
        assert np.array_equal(Hd[:, :-1], H)

    def test_fixed_parameters_drop_rows(self):
        theta, spec = SMALL_TRUTH["ST"]
        data = simulate(theta, spec, 50, 3)
        f = fit(spec, data, FitConfig(n_starts=2), fixed={"rho": -0.3})
        assert score_matrix(f, data).shape == (5, 50)


class TestNormalCurvature:
    def test_null_direction(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        _, _, Vt = np.linalg.svd(H)
        d = Vt[-1]
        assert normal_curvature(f, H, d) <= 1e-10 * np.trace(dense_F(f, H))

    def test_basis_direction(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        F = dense_F(f, H)
        for t in (0, 13, 49):
            e = np.zeros(data.n)
            e[t] = 1.0
            assert normal_curvature(f, H, e) == pytest.approx(2 * F[t, t], rel=1e-10)

    def test_max_direction_against_dense_eigensolver(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        w, V = np.linalg.eigh(dense_F(f, H))
        rep = influence_analysis(f, data)
        assert rep.lambda_max == pytest.approx(w[-1], rel=1e-10)
        assert abs(normal_curvature(f, H, rep.d_max) - 2 * w[-1]) <= 1e-8 * max(1.0, w[-1])
        assert abs(abs(rep.d_max @ V[:, -1]) - 1.0) <= 1e-8

    def test_orthonormal_basis_sums_to_twice_trace(self, st_small, rng):
        f, data = st_small
        H = score_matrix(f, data)
        Q, _ = np.linalg.qr(rng.standard_normal((data.n, data.n)))
        total = sum(normal_curvature(f, H, Q[:, i]) for i in range(data.n))
        assert total == pytest.approx(2 * np.trace(dense_F(f, H)), rel=1e-8)

    def test_rejects_non_unit_direction(self, st_small):
        f, data = st_small
        with pytest.raises(ValueError):
            normal_curvature(f, score_matrix(f, data), np.ones(data.n))


class TestInfluenceReport:
    def test_invariants(self, st_small):
        f, data = st_small
        rep = influence_analysis(f, data, tau=2.0)
        H = score_matrix(f, data)
        F = dense_F(f, H)
        assert np.allclose(rep.B, np.diag(F) / np.linalg.norm(F, "fro"), rtol=1e-10, atol=0)
        assert np.all((rep.B >= 0) & (rep.B <= 1))
        assert rep.m0_bar == pytest.approx(np.mean(rep.B), rel=1e-14)
        assert rep.var_m0 == pytest.approx(np.var(rep.B, ddof=1), rel=1e-12)
        assert rep.benchmark == pytest.approx(rep.m0_bar + 2 * np.sqrt(rep.var_m0), rel=1e-14)
        assert rep.influential == tuple(np.flatnonzero(rep.B > rep.benchmark))
        assert abs(np.linalg.norm(rep.d_max) - 1) <= 1e-10
        assert np.allclose(rep.C, 2 * np.diag(F), rtol=1e-10)

    def test_max_direction_method(self, st_small):
        f, data = st_small
        rep = influence_analysis(f, data, method="dmax")
        assert np.allclose(rep.B, np.abs(rep.d_max))
        assert np.all((rep.B >= 0) & (rep.B <= 1))
        with pytest.raises(ValueError):
            influence_analysis(f, data, method="other")

    def test_exchangeable_curvatures_flag_nothing(self):
        n = 40
        H = np.vstack([np.where(np.arange(n) % 2, 1.0, -1.0), np.ones(n)])
        rep = influence_from_scores(H, np.eye(2) * 3.0, tau=0.1)
        assert rep.var_m0 == 0.0
        assert rep.influential == ()

    def test_permutation_carries_through(self, st_small, rng):
        f, data = st_small
        perm = rng.permutation(data.n)
        shuffled = GrowthDataset(data.ages[perm], data.lengths[perm])
        a, b = influence_analysis(f, data), influence_analysis(f, shuffled)
        assert np.allclose(b.B, a.B[perm], rtol=1e-12)
        assert b.benchmark == pytest.approx(a.benchmark, rel=1e-12)
        assert b.m0_bar == pytest.approx(a.m0_bar, rel=1e-12)
        assert sorted(perm[list(b.influential)]) == list(a.influential)

    def test_uniform_scaling_of_curvature(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        a = influence_from_scores(H, f.info_matrix)
        b = influence_from_scores(7.0 * H, f.info_matrix)
        assert np.allclose(a.B, b.B, rtol=1e-12)
        assert a.influential == b.influential

    def test_errors(self, st_small):
        f, data = st_small
        H = score_matrix(f, data)
        with pytest.raises(np.linalg.LinAlgError):
            influence_from_scores(H, np.zeros((6, 6)))
        with pytest.raises(ValueError):
            influence_from_scores(H[:, :1], f.info_matrix)
        with pytest.raises(ValueError):
            influence_from_scores(H, f.info_matrix, tau=0.0)

    def test_null_normal_flag_rate(self):
        theta = ThetaVB(35.0, 0.09, -2.5, 4.0)
        spec = ModelSpec("N")
        rates = []
        for rep in range(20):
            data = simulate(theta, spec, 100, 500 + rep)
            f = fit(spec, data, FitConfig(n_starts=2))
            rates.append(len(influence_analysis(f, data).influential) / data.n)
        assert np.mean(rates) <= 0.05


class TestLikelihoodDisplacement:
    def test_unperturbed_is_zero(self, st_small):
        f, data = st_small
        assert likelihood_displacement(f, data, np.ones(data.n)) == 0.0

    def test_case_deletion(self, st_small):
        f, data = st_small
        t = 11
        w = np.ones(data.n)
        w[t] = 0.0
        ld = likelihood_displacement(f, data, w)
        deleted = fit(f.spec, data.without([t]), FitConfig(n_starts=1), start=f.theta_hat)
        oracle = 2 * (f.loglik - loglik(deleted.theta_hat, f.spec, data))
        assert ld == pytest.approx(oracle, rel=1e-6, abs=1e-9)
        assert ld > 0

    @pytest.mark.parametrize("family", ["N", "SN", "T", "ST"])
    def test_second_difference_matches_curvature(self, family):
        rng = np.random.default_rng(77)
        for f, data in smooth_fits(family):
            H = score_matrix(f, data)
            d = rng.standard_normal(data.n)
            d /= np.linalg.norm(d)
            eps = 0.01
            ld = likelihood_displacement(f, data, 1.0 + eps * d)
            # LD(w0 + eps d) = eps^2 / 2 * C_d + O(eps^3)
            assert 2 * ld / eps**2 == pytest.approx(normal_curvature(f, H, d), rel=0.10)

    def test_validation(self, st_small):
        f, data = st_small
        with pytest.raises(ValueError):
            likelihood_displacement(f, data, np.ones(3))
        with pytest.raises(ValueError):
            likelihood_displacement(f, data, -np.ones(data.n))


class TestRelativeChange:
    def test_formula_exact_arithmetic(self):
        full = (Fraction("35.137"), Fraction("0.083"), Fraction("-3.075"))
        filt = (Fraction("35.097"), Fraction("0.084"), Fraction("-2.884"))
        exact = [float(abs(1 - b / a) * 100) for a, b in zip(full, filt)]
        assert np.allclose(relative_change([float(v) for v in full], [float(v) for v in filt]), exact, rtol=1e-13)

    def test_skew_t_example_asymptote_and_origin(self):
        rc = relative_change((35.137, 0.083, -3.075), (35.097, 0.084, -2.884))
        assert round(rc[0], 2) == 0.11
        assert round(rc[2], 2) == 6.21

    def test_normal_example(self):
        rc = relative_change((35.147, 0.083, -3.072), (35.103, 0.084, -2.922))
        assert np.allclose(np.round(rc, 2), [0.13, 1.20, 4.88])
        assert np.allclose(np.round(rc, 1), [0.1, 1.2, 4.9])
        assert round(rc[2]) == 5

    def test_empty_set_leaves_fit_unchanged(self, st_small):
        f, data = st_small
        rep = influence_analysis(f, data, tau=1e6)
        assert rep.influential == ()
        refit, rc = filter_and_refit(f, data, rep)
        assert refit is f
        assert [e.rc_percent for e in rc.entries] == [0.0, 0.0, 0.0]
        assert rc.n_filtered == rc.n_full == data.n

    def test_refit_without_influential_points(self):
        theta, spec = SMALL_TRUTH["N"]
        data = simulate(theta, spec, 100, 9)
        y = data.lengths.copy()
        y[5] += 10 * 2.0
        data = GrowthDataset(data.ages, y)
        f = fit(spec, data, FitConfig(n_starts=2))
        rep = influence_analysis(f, data)
        assert 5 in rep.influential
        refit, rc = filter_and_refit(f, data, rep, FitConfig(n_starts=2))
        assert rc.n_filtered == data.n - len(rep.influential) == refit.n_used
        assert rc.removed == rep.influential
        for e, a, b in zip(rc.entries, f.theta_hat.beta, refit.theta_hat.beta):
            assert e.full == a and e.filtered == b
            assert e.rc_percent == pytest.approx(abs(1 - b / a) * 100, rel=1e-14)
