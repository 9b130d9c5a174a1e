import itertools

import numpy as np
import pytest

from longmi.errors import (
    EmptyCategory,
    ParseError,
    PerfectSeparation,
    RankDeficient,
)
from longmi.fitters import (
    fit_linear_and_draw,
    fit_logistic,
    fit_polr,
    polr_category_probs,
)
from longmi.formula import parse_formula
from longmi.lmm import deviance, fit_lmm_arrays
from longmi.rng import RngStream


class TestFormula:
    def test_simple(self):
        f = parse_formula("y ~ x + (1|id)")
        assert f.response == "y"
        assert [str(t) for t in f.fixed] == ["x"]
        assert f.random == ("id",)

    def test_nested_with_factor(self):
        f = parse_formula("y ~ a + factor(s) + (1 | school/id)")
        assert [str(t) for t in f.fixed] == ["a", "factor(s)"]
        assert f.random == ("school", "id")

    def test_unclosed_random_part(self):
        with pytest.raises(ParseError) as err:
            parse_formula("y ~ (1|id")
        assert err.value.position == len("y ~ (1|id")

    def test_whitespace_insensitive(self):
        assert parse_formula("y~x+(1|g)") == parse_formula(" y ~ x + ( 1 | g ) ")

    def test_response_reuse_rejected(self):
        with pytest.raises(ParseError):
            parse_formula("y ~ y + x")


class TestLinearDraw:
    def test_exact_fit_floors_sigma(self):
        x = np.arange(1.0, 11.0)
        X = np.column_stack([np.ones(10), x])
        with pytest.warns(UserWarning, match="flooring"):
            d = fit_linear_and_draw(RngStream(0), X, 2.0 * x)
        assert d.beta_hat[1] == pytest.approx(2.0, abs=1e-12)
        assert d.sigma2_draw <= 1e-8

    def test_reproducible_draws(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(50), rng.normal(size=50)])
        y = X @ [1.0, 2.0] + rng.normal(size=50)
        a = fit_linear_and_draw(RngStream(11, 2), X, y)
        b = fit_linear_and_draw(RngStream(11, 2), X, y)
        np.testing.assert_array_equal(a.beta_draw, b.beta_draw)
        assert a.sigma2_draw == b.sigma2_draw

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(4)
        n = 10_000
        x = rng.normal(size=n)
        X = np.column_stack([np.ones(n), x])
        y = 1.0 + 3.0 * x + rng.normal(size=n)
        d = fit_linear_and_draw(RngStream(5), X, y)
        np.testing.assert_allclose(d.beta_hat, [1.0, 3.0], atol=0.05)

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(20), np.ones(20)])
        with pytest.raises(RankDeficient):
            fit_linear_and_draw(RngStream(0), X, np.arange(20.0))


class TestLogistic:
    def test_saturated_two_by_two(self):
        # x=0: 30 ones / 70 zeros; x=1: 60 ones / 40 zeros
        x = np.concatenate([np.zeros(100), np.ones(100)])
        y = np.concatenate([np.ones(30), np.zeros(70), np.ones(60), np.zeros(40)])
        X = np.column_stack([np.ones(200), x])
        fit = fit_logistic(X, y)
        b0 = np.log(30 / 70)
        b1 = np.log(60 / 40) - b0
        assert fit.converged
        np.testing.assert_allclose(fit.beta_hat, [b0, b1], atol=1e-6)

    def test_all_equal_response_degenerate(self):
        X = np.column_stack([np.ones(40), np.arange(40.0)])
        with pytest.raises(PerfectSeparation):
            fit_logistic(X, np.ones(40))

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(7)
        n = 100_000
        x = rng.normal(size=n)
        p = 1 / (1 + np.exp(0.5 - x))
        y = (rng.random(n) < p).astype(float)
        fit = fit_logistic(np.column_stack([np.ones(n), x]), y)
        np.testing.assert_allclose(fit.beta_hat, [-0.5, 1.0], atol=0.05)

    def test_cov_is_spd(self):
        rng = np.random.default_rng(8)
        X = np.column_stack([np.ones(500), rng.normal(size=(500, 2))])
        y = (rng.random(500) < 0.4).astype(float)
        fit = fit_logistic(X, y)
        np.linalg.cholesky(fit.cov_hat)


class TestPolr:
    def test_binary_matches_logistic(self):
        rng = np.random.default_rng(9)
        n = 2000
        x = rng.normal(size=n)
        p = 1 / (1 + np.exp(-(0.3 + 0.8 * x)))
        y = (rng.random(n) < p).astype(int)
        X = np.column_stack([np.ones(n), x])
        lg = fit_logistic(X, y.astype(float))
        po = fit_polr(X, y)
        # P(y=1) = expit(x b - cut): cut = -intercept, slope matches
        assert po.n_cutpoints == 1
        assert po.beta_hat[0] == pytest.approx(-lg.beta_hat[0], abs=1e-6)
        assert po.beta_hat[2] == pytest.approx(lg.beta_hat[1], abs=1e-6)

    def test_intercept_only_cutpoints(self):
        y = np.repeat([0, 1, 2], [200, 300, 500])
        X = np.ones((1000, 1))
        fit = fit_polr(X, y)
        logit = lambda p: np.log(p / (1 - p))
        np.testing.assert_allclose(
            fit.beta_hat[:2], [logit(0.2), logit(0.5)], atol=1e-6
        )

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(10)
        n = 100_000
        x = rng.normal(size=n)
        cuts = np.array([-1.0, 0.5])
        eta = 0.7 * x
        u = rng.random(n)
        cdf1 = 1 / (1 + np.exp(-(cuts[0] - eta)))
        cdf2 = 1 / (1 + np.exp(-(cuts[1] - eta)))
        y = np.where(u < cdf1, 0, np.where(u < cdf2, 1, 2))
        fit = fit_polr(np.column_stack([np.ones(n), x]), y)
        assert fit.beta_hat[3] == pytest.approx(0.7, abs=0.05)
        np.testing.assert_allclose(fit.beta_hat[:2], cuts, atol=0.05)

    def test_cutpoints_increasing_and_probs_sum(self):
        rng = np.random.default_rng(11)
        y = rng.integers(0, 4, size=500)
        x = rng.normal(size=500)
        X = np.column_stack([np.ones(500), x])
        fit = fit_polr(X, y)
        assert (np.diff(fit.beta_hat[: fit.n_cutpoints]) > 0).all()
        probs = polr_category_probs(fit, X, fit.n_cutpoints)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_category(self):
        with pytest.raises(EmptyCategory):
            fit_polr(np.ones((10, 1)), np.repeat([0, 2], 5))


def one_way(rng, groups, per, sd_b, sd_e, mean=0.0):
    grp = np.repeat(np.arange(groups), per)
    y = mean + rng.normal(0, sd_b, groups)[grp] + rng.normal(0, sd_e, len(grp))
    return y, np.ones((len(grp), 1)), grp


class TestLmm:
    def test_balanced_one_way_matches_anova(self):
        rng = np.random.default_rng(12)
        y, X, grp = one_way(rng, 10, 5, 1.0, 0.7, mean=2.0)
        fit = fit_lmm_arrays(y, X, [grp], "REML")
        means = np.array([y[grp == g].mean() for g in range(10)])
        msw = sum(((y[grp == g] - means[g]) ** 2).sum() for g in range(10)) / (50 - 10)
        msb = 5 * ((means - y.mean()) ** 2).sum() / 9
        assert fit.var_components["residual"] == pytest.approx(msw, abs=1e-8)
        assert fit.var_components["level0"] == pytest.approx(
            max((msb - msw) / 5, 0.0), abs=1e-8
        )

    def test_zero_between_variance_boundary(self):
        rng = np.random.default_rng(13)
        per = 6
        # every group holds the same values, so group means are identical
        y0 = np.tile(rng.normal(size=per), 8)
        grp = np.repeat(np.arange(8), per)
        fit = fit_lmm_arrays(y0, np.ones((48, 1)), [grp], "REML")
        assert fit.var_components["level0"] == 0.0
        assert fit.boundary == ("level0",)

    def test_three_level_beats_deviance_grid(self):
        rng = np.random.default_rng(14)
        ns, nst, nw = 4, 5, 3
        school = np.repeat(np.arange(ns), nst * nw)
        student = np.repeat(np.arange(ns * nst), nw)
        n = ns * nst * nw
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = (
            X @ [1.0, -0.3]
            + rng.normal(0, 0.05, ns)[school]
            + rng.normal(0, 0.25, ns * nst)[student]
            + rng.normal(0, 0.25, n)
        )
        fit = fit_lmm_arrays(y, X, [school, student], "ML")
        dev_fit = -2 * fit.loglik
        grid = np.linspace(1e-4, 0.2, 20)
        grid_min = min(
            deviance(y, X, [school, student], np.array(t), "ML")
            for t in itertools.product(grid, repeat=3)
        )
        assert dev_fit <= grid_min + 1e-9

    def test_reml_ml_fixed_effects_agree_balanced(self):
        rng = np.random.default_rng(15)
        y, X, grp = one_way(rng, 12, 4, 0.8, 0.5, mean=-1.0)
        fr = fit_lmm_arrays(y, X, [grp], "REML")
        fm = fit_lmm_arrays(y, X, [grp], "ML")
        np.testing.assert_allclose(fr.beta, fm.beta, atol=1e-8)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(16)
        y, X, grp = one_way(rng, 6, 5, 0.5, 1.0)
        X = np.column_stack([X, rng.normal(size=30)])
        perm = rng.permutation(30)
        a = fit_lmm_arrays(y, X, [grp], "REML")
        b = fit_lmm_arrays(y[perm], X[perm], [grp[perm]], "REML")
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)
        assert a.var_components["level0"] == pytest.approx(
            b.var_components["level0"], abs=1e-8
        )

    def test_duplicated_column_rank_deficient(self):
        rng = np.random.default_rng(17)
        y, X, grp = one_way(rng, 6, 5, 0.5, 1.0)
        X2 = np.column_stack([X, X[:, 0]])
        with pytest.raises(RankDeficient):
            fit_lmm_arrays(y, X2, [grp], "REML")

    def test_optimum_beats_random_probes(self):
        rng = np.random.default_rng(18)
        y, X, grp = one_way(rng, 15, 4, 0.6, 0.9, mean=1.0)
        fit = fit_lmm_arrays(y, X, [grp], "ML")
        dev_fit = -2 * fit.loglik
        for _ in range(50):
            probe = rng.uniform(0.01, 3.0, size=2)
            assert dev_fit <= deviance(y, X, [grp], probe, "ML") + 1e-9


class TestFitLmmFormulaInterface:
    def make_dataset(self, seed=19, n_units=40):
        from longmi.table import ColumnSpec, Dataset

        rng = np.random.default_rng(seed)
        ids = np.repeat(np.arange(n_units), 3)
        x = rng.normal(size=3 * n_units)
        g = rng.integers(0, 3, 3 * n_units).astype(float)
        y = 1 + 0.5 * x + (g == 2) * 0.3 + rng.normal(0, 0.5, n_units)[ids]
        y = y + rng.normal(0, 0.5, 3 * n_units)
        return Dataset.build(
            [
                ColumnSpec("id", "continuous", "unit-id"),
                ColumnSpec("time", "continuous", "time"),
                ColumnSpec("x", "continuous", "analysis"),
                ColumnSpec("g", "categorical", "analysis", ("a", "b", "c")),
                ColumnSpec("y", "continuous", "analysis"),
            ],
            {
                "id": ids,
                "time": np.tile([1.0, 2.0, 3.0], n_units),
                "x": x,
                "g": g,
                "y": y,
            },
            shape_kind="long",
        )

    def test_factor_expansion_and_components(self):
        from longmi.lmm import fit_lmm

        fit = fit_lmm("y ~ x + factor(g) + (1|id)", self.make_dataset())
        assert fit.names == ["(Intercept)", "x", "g_b", "g_c"]
        assert set(fit.var_components) == {"id", "residual"}
        assert fit.converged

    def test_no_random_part_is_plain_regression(self):
        from longmi.lmm import fit_lmm

        fit = fit_lmm("y ~ x", self.make_dataset())
        assert fit.var_components.keys() == {"residual"}
        assert fit.grouping == ()

    def test_masked_model_variable_rejected(self):
        from longmi.errors import IncompleteModelData
        from longmi.lmm import fit_lmm
        from longmi.table import Dataset

        d = self.make_dataset()
        values = d.values.copy()
        values[0, d.col_index("x")] = np.nan
        d2 = Dataset(d.columns, values, shape_kind="long", validate=False)
        with pytest.raises(IncompleteModelData):
            fit_lmm("y ~ x + (1|id)", d2)

    def test_unknown_column_at_bind(self):
        from longmi.errors import UnknownColumn
        from longmi.lmm import fit_lmm

        with pytest.raises(UnknownColumn):
            fit_lmm("y ~ nope + (1|id)", self.make_dataset())
