import numpy as np
import pytest
from scipy.stats import norm

from stratarm.adjust import estimate, wald_late
from stratarm.core import ExperimentData, Propensity
from stratarm.design import Design, GroupPairing, assign_complete, pair_groups
from stratarm.exceptions import DegenerateUnion, MissingPairing, NotRegressionBased
from stratarm.inference import (
    EHW_HC2,
    EXACT,
    defining_regression,
    ehw_hc2_variance,
    exact_variance,
    late_variance,
    variance_components,
)


def double_sum_components(ya, d, groups, unions, p, k, a):
    """Component-wise transcription of the exact variance with explicit loops."""
    n = len(ya)
    w = (d - p) * ya / (p - p * p)
    sample_term = np.mean(w ** 2) - np.mean(w) ** 2
    v1 = v0 = 0.0
    for union in unions:
        idx = np.concatenate([groups[g] for g in union])
        au = d[idx].sum()
        bu = len(idx) - au
        for i in idx:
            for j in idx:
                if i != j:
                    v1 += ya[i] * ya[j] * d[i] * d[j] / (au - 1)
                    v0 += ya[i] * ya[j] * (1 - d[i]) * (1 - d[j]) / (bu - 1)
    v1 *= (1 - p) / p ** 2 / n
    v0 *= p / (1 - p) ** 2 / n
    v10 = 0.0
    for g in groups:
        for i in g:
            for j in g:
                v10 += ya[i] * ya[j] * d[i] * (1 - d[j]) * k / (a * (k - a))
    return sample_term, v1, v0, v10 / n


class TestExact:
    @pytest.mark.parametrize("fixture", ["pairs_experiment", "triples_experiment"])
    @pytest.mark.parametrize("key", ["UNADJ", "LIN", "PLIN", "TOM"])
    def test_matches_double_sum(self, fixture, key, request):
        data, design, pairing = request.getfixturevalue(fixture)
        est = estimate(key, data, design, pairing=pairing)
        rep = exact_variance(est, data, design, pairing)
        prop = design.propensity
        want = double_sum_components(est.augmented_outcomes, data.d.astype(float), design.groups,
                                     pairing.unions, prop.p, prop.k, prop.a)
        np.testing.assert_allclose(rep.components, want, rtol=1e-10, atol=1e-12)
        st, v1, v0, v10 = want
        assert rep.raw_v_hat == pytest.approx(st - v1 - v0 - 2 * v10)
        assert rep.method == EXACT

    def test_four_pairs(self):
        ya = np.array([1.0, 2.0, 0.5, -1.0, 3.0, 1.0, 0.0, 2.0])
        d = np.array([1, 0, 0, 1, 1, 0, 1, 0], dtype=float)
        groups = [np.array([0, 1]), np.array([2, 3]), np.array([4, 5]), np.array([6, 7])]
        glab = np.repeat(np.arange(4), 2)
        ulab = np.repeat([0, 0, 1, 1], 2)
        got = variance_components(ya, d, glab, ulab, 0.5, 2, 1)
        want = double_sum_components(ya, d, groups, [(0, 1), (2, 3)], 0.5, 2, 1)
        np.testing.assert_allclose(got, want)
        # hand value of v10: sum over pairs of 2 * Y_treated * Y_control, over n
        assert got[3] == pytest.approx(2 * (1 * 2 + -1 * 0.5 + 3 * 1 + 0 * 2) / 8)

    def test_zero_outcomes(self, pairs_experiment):
        data, design, pairing = pairs_experiment
        data = data.replace(y=np.zeros(data.n))
        rep = exact_variance(estimate("PLIN", data, design), data, design, pairing)
        assert rep.v_hat == 0 and rep.ci_low == rep.ci_high == 0

    @pytest.mark.parametrize("key", ["UNADJ", "LIN", "FE", "PLIN", "GO", "TOM"])
    def test_shift_invariance(self, triples_experiment, key):
        data, design, pairing = triples_experiment
        a = exact_variance(estimate(key, data, design), data, design, pairing)
        moved = data.replace(y=data.y + 7.5)
        b = exact_variance(estimate(key, moved, design), moved, design, pairing)
        assert b.v_hat == pytest.approx(a.v_hat, abs=1e-8)
        assert b.ci_low - a.ci_low == pytest.approx(0, abs=1e-8)

    def test_interval(self, pairs_experiment):
        data, design, pairing = pairs_experiment
        est = estimate("LIN", data, design)
        rep = exact_variance(est, data, design, pairing, alpha=0.1)
        half = norm.ppf(0.95) * np.sqrt(rep.v_hat / data.n)
        assert rep.ci_high - est.tau_hat == pytest.approx(half)
        assert rep.covers(est.tau_hat)
        assert rep.to_dict()["method"] == "exact"

    def test_bad_alpha(self, pairs_experiment):
        data, design, pairing = pairs_experiment
        with pytest.raises(ValueError):
            exact_variance(estimate("LIN", data, design), data, design, pairing, alpha=1.5)

    def test_missing_pairing(self, pairs_experiment):
        data, design, _ = pairs_experiment
        est = estimate("LIN", data, design)
        with pytest.raises(MissingPairing):
            exact_variance(est, data, design, None)
        wrong = GroupPairing(partner=np.array([1, 0]), unions=[(0, 1)], centroid_score=0.0, triple=None)
        with pytest.raises(MissingPairing):
            exact_variance(est, data, design, wrong)

    def test_degenerate_union(self, pairs_experiment):
        data, design, _ = pairs_experiment
        G = design.n_groups
        partner = np.arange(G) ^ 1
        partner[0], partner[1] = -1, -1
        unions = [(0,), (1,)] + [(g, g + 1) for g in range(2, G, 2)]
        pairing = GroupPairing(partner=partner, unions=unions, centroid_score=0.0, triple=None)
        with pytest.raises(DegenerateUnion):
            exact_variance(estimate("LIN", data, design), data, design, pairing)

    def test_clamped_flag(self):
        from stratarm.inference import _report

        rep = _report(0.3, (1.0, 1.0, 1.0, 1.0), 10, 0.05, EXACT)
        assert rep.clamped and rep.v_hat == 0 and rep.raw_v_hat == pytest.approx(-3)
        assert rep.ci_low == rep.ci_high == 0.3

    def test_late_full_compliance(self, triples_experiment):
        data, design, pairing = triples_experiment
        full = data.replace(uptake=data.d.copy())
        for key in ("PLIN", "GO", "TOM"):
            late = late_variance(wald_late(full, design, key), full, design, pairing)
            ate = exact_variance(estimate(key, data, design), data, design, pairing)
            assert late.v_hat == pytest.approx(ate.v_hat, rel=1e-10)


def sandwich(X, y, extra=None):
    XtX = np.linalg.inv(X.T @ X)
    beta = XtX @ X.T @ y
    e = y - X @ beta
    H = X @ XtX @ X.T
    lev = np.diag(H) + (0 if extra is None else extra)
    meat = X.T @ np.diag(e ** 2 / (1 - lev)) @ X
    return XtX @ meat @ XtX


class TestHC2:
    def test_lin_matches_sandwich(self, pairs_experiment):
        data, design, _ = pairs_experiment
        est = estimate("LIN", data, design)
        W = data.h - data.h.mean(0)
        d = data.d.astype(float)
        X = np.column_stack([np.ones(data.n), d, W, W * d[:, None]])
        cov = sandwich(X, data.y)
        rep = ehw_hc2_variance(est, data, design)
        assert rep.v_hat == pytest.approx(data.n * cov[1, 1], rel=1e-10)
        assert rep.method == EHW_HC2

    def test_fe_matches_dummy_regression(self, triples_experiment):
        data, design, _ = triples_experiment
        est = estimate("FE", data, design)
        dummies = (design.labels[:, None] == np.arange(design.n_groups)).astype(float)
        X = np.column_stack([data.d.astype(float), data.h, dummies])
        cov = sandwich(X, data.y)
        rep = ehw_hc2_variance(est, data, design)
        assert rep.v_hat == pytest.approx(data.n * cov[0, 0], rel=1e-8)

    def test_not_regression_based(self, pairs_experiment):
        data, design, pairing = pairs_experiment
        for key in ("GO", "TOM"):
            with pytest.raises(NotRegressionBased):
                ehw_hc2_variance(estimate(key, data, design), data, design)
        with pytest.raises(NotRegressionBased):
            defining_regression(estimate("ADAPTIVE", data, design, pairing=pairing), data, design)

    def test_two_sample_formula(self):
        rng = np.random.default_rng(5)
        ratios = []
        n = 200
        for rep in range(500):
            design = assign_complete(n, Propensity(1, 2), rng_seed=rep)
            y = rng.standard_normal(n)
            data = ExperimentData(y=y, d=design.treatment, h=np.zeros((n, 0)))
            est = estimate("UNADJ", data)
            hc2 = ehw_hc2_variance(est, data)
            d = design.treatment.astype(bool)
            textbook = y[d].var(ddof=1) / d.sum() + y[~d].var(ddof=1) / (~d).sum()
            ratios.append(hc2.se ** 2 / textbook)
        assert abs(np.mean(ratios) - 1) < 0.1
