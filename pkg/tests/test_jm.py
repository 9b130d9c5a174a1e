import numpy as np
import pytest

from longmi.errors import DegenerateSeries, TooFewClusters, UnknownParam
from longmi.jm import (
    ChainTrace,
    JmSpec,
    _in_region,
    autocorr,
    decode_latent,
    encode_latent,
    run_jm,
    trace_stats,
)
from longmi.rng import RngStream
from longmi.table import ColumnSpec, Dataset


def wide_dataset(cols, data):
    specs = [ColumnSpec("id", "continuous", "unit-id")]
    arrays = {"id": np.arange(len(next(iter(data.values()))))}
    for name, kind, levels in cols:
        specs.append(ColumnSpec(name, kind, "analysis", levels))
        arrays[name] = data[name]
    return Dataset.build(specs, arrays, shape_kind="wide")


class TestLatentRules:
    def test_binary_negative_latent_is_second_level(self):
        assert decode_latent(np.array([[-0.5]]))[0] == 1.0

    def test_three_level_max_positive(self):
        assert decode_latent(np.array([[0.2, 1.4]]))[0] == 1.0  # second level

    def test_all_negative_reference(self):
        assert decode_latent(np.array([[-1.0, -2.0]]))[0] == 2.0

    def test_encode_decode_roundtrip(self):
        rng = RngStream(0)
        codes = np.array([0.0, 1, 2, 3, 1, 0, np.nan, 2])
        z = encode_latent(rng, codes, 4)
        got = decode_latent(z)
        obs = ~np.isnan(codes)
        np.testing.assert_array_equal(got[obs], codes[obs])

    def test_region_membership(self):
        z = np.array([[1.0, -1.0], [-1.0, 2.0], [-0.5, -0.5], [2.0, 3.0]])
        codes = np.array([0.0, 1.0, 2.0, 1.0])
        assert _in_region(z, codes).all()
        bad = np.array([1.0, 0.0, 0.0, 0.0])
        assert not _in_region(z, bad).any()


class TestRunArithmetic:
    def test_sweep_counts_and_snapshots(self):
        rng = RngStream(1)
        y = rng.normal(size=30)
        y[:5] = np.nan
        d = wide_dataset([("y", "continuous", None)], {"y": y})
        spec = JmSpec(y_cols=("y",), nburn=3, nbetween=2, nimp=2)
        stack, trace = run_jm(RngStream(2), spec, d)
        assert trace.n_iter == 5  # 3 burn-in + 2 between
        assert stack.m == 2

    def test_no_missing_identity(self):
        rng = RngStream(3)
        d = wide_dataset(
            [("a", "continuous", None), ("b", "continuous", None)],
            {"a": rng.normal(size=20), "b": rng.normal(size=20)},
        )
        spec = JmSpec(y_cols=("a", "b"), nburn=4, nbetween=2, nimp=3)
        stack, _ = run_jm(RngStream(4), spec, d)
        for imp in stack.imputations:
            assert imp.equals(d.completed(d.values))

    def test_uncovered_incomplete_column_rejected(self):
        y = np.array([1.0, np.nan, 2.0])
        d = wide_dataset(
            [("y", "continuous", None), ("z", "continuous", None)],
            {"y": y, "z": y[::-1]},
        )
        with pytest.raises(ValueError, match="not listed"):
            run_jm(RngStream(0), JmSpec(y_cols=("y",), nburn=1, nbetween=1, nimp=1), d)


class TestMvnSampler:
    def test_single_missing_cell_posterior_mean(self):
        rho = 0.8
        rng = RngStream(5)
        n = 400
        x = rng.normal(size=n)
        y = rho * x + np.sqrt(1 - rho**2) * rng.normal(size=n)
        yv = y.copy()
        yv[0] = np.nan
        d = wide_dataset(
            [("a", "continuous", None), ("b", "continuous", None)],
            {"a": x, "b": yv},
        )
        spec = JmSpec(y_cols=("a", "b"), nburn=200, nbetween=1, nimp=2000)
        stack, _ = run_jm(RngStream(6), spec, d)
        draws = np.array([imp.column("b")[0] for imp in stack.imputations])
        mc_se = draws.std() / np.sqrt(len(draws))
        # fitted conditional mean is close to the generating one at n=400
        assert abs(draws.mean() - rho * x[0]) < 3 * mc_se + 0.05

    def test_binary_marginal_preserved(self):
        rng = RngStream(7)
        n = 1000
        b = (rng.random(n) < 0.7).astype(float)
        bv = b.copy()
        miss = rng.random(n) < 0.3
        bv[miss] = np.nan
        d = wide_dataset([("y", "binary", None)], {"y": bv})
        spec = JmSpec(y_cols=("y",), nburn=300, nbetween=25, nimp=40)
        stack, _ = run_jm(RngStream(8), spec, d)
        frac = np.mean([imp.column("y")[miss].mean() for imp in stack.imputations])
        assert frac == pytest.approx(0.70, abs=0.03)

    def test_observed_cells_bit_exact(self):
        rng = RngStream(9)
        n = 200
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        c = rng.integers(0, 3, n).astype(float)
        for arr, p in ((a, 0.2), (b, 0.3), (c, 0.25)):
            arr[rng.random(n) < p] = np.nan
        d = wide_dataset(
            [
                ("a", "continuous", None),
                ("b", "continuous", None),
                ("c", "categorical", ("x", "y", "z")),
            ],
            {"a": a, "b": b, "c": c},
        )
        spec = JmSpec(y_cols=("a", "b", "c"), nburn=30, nbetween=5, nimp=4)
        stack, _ = run_jm(RngStream(10), spec, d)
        for imp in stack.imputations:
            assert not imp.mask.any()
            for col in ("a", "b", "c"):
                obs = ~d.column_mask(col)
                np.testing.assert_array_equal(
                    imp.column(col)[obs], d.column(col)[obs]
                )

    def test_latent_regions_hold_and_omega_spd(self):
        rng = RngStream(11)
        n = 300
        c = rng.integers(0, 4, n).astype(float)
        c[rng.random(n) < 0.3] = np.nan
        a = rng.normal(size=n)
        d = wide_dataset(
            [("a", "continuous", None), ("c", "categorical", ("1", "2", "3", "4"))],
            {"a": a, "c": c},
        )
        from longmi.jm import _MvnSampler

        spec = JmSpec(y_cols=("a", "c"), nburn=10, nbetween=1, nimp=1)
        sampler = _MvnSampler(RngStream(12), spec, d)
        obs = ~np.isnan(c)
        for _ in range(25):
            sampler.sweep(RngStream(13).substream(_))
            np.linalg.cholesky(sampler.Omega)
            slot = sampler.layout.slots[1]
            z = sampler.Y[obs, slot.cols]
            assert _in_region(z, c[obs]).all()


class TestMlmmSampler:
    def make_two_level(self, seed=14, C=100, per=10, icc=0.3, miss=0.25):
        rng = RngStream(seed)
        clus = np.repeat(np.arange(C), per)
        u = rng.normal(0, np.sqrt(icc), C)[clus]
        y1 = u + rng.normal(0, np.sqrt(1 - icc), C * per)
        y2 = 0.5 * u + rng.normal(0, 1, C * per)
        y1v = y1.copy()
        y1v[rng.random(C * per) < miss] = np.nan
        specs = [
            ColumnSpec("id", "continuous", "unit-id"),
            ColumnSpec("g", "continuous", "cluster-id"),
            ColumnSpec("a", "continuous", "analysis"),
            ColumnSpec("b", "continuous", "analysis"),
        ]
        d = Dataset.build(
            specs,
            {"id": np.arange(C * per), "g": clus, "a": y1v, "b": y2},
            shape_kind="wide",
        )
        return d, clus

    def test_icc_recovery(self):
        d, _ = self.make_two_level()
        spec = JmSpec(y_cols=("a", "b"), clus="g", nburn=500, nbetween=1, nimp=1200)
        _, trace = run_jm(RngStream(15), spec, d)
        psi = trace.series("psi.u._intercept.a.u._intercept.a")[500:]
        omega = trace.series("omega.a.a")[500:]
        icc_est = float((psi / (psi + omega)).mean())
        assert icc_est == pytest.approx(0.3, abs=0.05)

    def test_psi_zero_reduces_to_single_level(self):
        # with the random-effect block pinned at zero the two-level sweep
        # must match the single-level sampler distributionally
        d, _ = self.make_two_level(seed=16, C=30, per=5, icc=0.0, miss=0.2)
        from longmi.jm import _MlmmSampler, _MvnSampler

        spec2 = JmSpec(y_cols=("a", "b"), clus="g", nburn=1, nbetween=1, nimp=1)
        spec1 = JmSpec(y_cols=("a", "b"), nburn=1, nbetween=1, nimp=1)
        target = int(np.where(np.isnan(d.column("a")))[0][0])

        ml = _MlmmSampler(RngStream(17), spec2, d)
        ml.psi_fixed_zero = True
        rng = RngStream(18)
        draws2 = []
        for i in range(3000):
            ml.sweep(rng)
            draws2.append(ml.Y[target, 0])
        mv = _MvnSampler(RngStream(17), spec1, d)
        rng = RngStream(19)
        draws1 = []
        for i in range(3000):
            mv.sweep(rng)
            draws1.append(mv.Y[target, 0])
        a2, a1 = np.array(draws2[500:]), np.array(draws1[500:])
        se = np.sqrt(a1.var() / len(a1) + a2.var() / len(a2))
        assert abs(a1.mean() - a2.mean()) < 5 * se + 0.02
        assert a1.std() == pytest.approx(a2.std(), rel=0.15)

    def test_cluster_constant_block(self):
        rng = RngStream(20)
        C, per = 60, 5
        clus = np.repeat(np.arange(C), per)
        u = rng.normal(0, 1.0, C)
        w = u + rng.normal(0, 0.2, C)
        y = u[clus] + rng.normal(0, 0.5, C * per)
        wv = w.copy()
        miss_c = rng.random(C) < 0.4
        wv[miss_c] = np.nan
        d = Dataset.build(
            [
                ColumnSpec("id", "continuous", "unit-id"),
                ColumnSpec("g", "continuous", "cluster-id"),
                ColumnSpec("y", "continuous", "analysis"),
                ColumnSpec("w2", "continuous", "analysis"),
            ],
            {"id": np.arange(C * per), "g": clus, "y": y, "w2": wv[clus]},
            shape_kind="wide",
        )
        spec = JmSpec(
            y_cols=("y",), y2_cols=("w2",), clus="g", nburn=300, nbetween=20, nimp=20
        )
        stack, _ = run_jm(RngStream(21), spec, d)
        for imp in stack.imputations:
            vals = imp.column("w2")
            for c in range(C):
                assert len(np.unique(vals[clus == c])) == 1
        imp_means = np.mean(
            [[imp.column("w2")[clus == c][0] for c in np.where(miss_c)[0]]
             for imp in stack.imputations],
            axis=0,
        )
        assert np.corrcoef(imp_means, w[miss_c])[0, 1] > 0.9

    def test_cluster_specific_covariance_runs(self):
        d, _ = self.make_two_level(seed=22, C=40, per=8)
        spec = JmSpec(
            y_cols=("a", "b"),
            clus="g",
            cov_mode="cluster-specific",
            nburn=50,
            nbetween=5,
            nimp=3,
        )
        stack, _ = run_jm(RngStream(23), spec, d)
        assert stack.m == 3
        for imp in stack.imputations:
            assert not imp.mask.any()

    def test_too_few_clusters(self):
        d, clus = self.make_two_level(seed=24, C=2, per=10)
        spec = JmSpec(
            y_cols=("a", "b"), clus="g", cov_mode="cluster-specific",
            nburn=2, nbetween=1, nimp=1,
        )
        with pytest.raises(TooFewClusters):
            run_jm(RngStream(25), spec, d)


class TestTraceDiagnostics:
    def test_series_and_unknown_param(self):
        t = ChainTrace(["p", "q"])
        t.record([1.0, 2.0])
        t.record([3.0, 4.0])
        np.testing.assert_array_equal(trace_stats(t, "q"), [2.0, 4.0])
        with pytest.raises(UnknownParam):
            trace_stats(t, "nope")

    def test_constant_series_degenerate(self):
        with pytest.raises(DegenerateSeries):
            autocorr(np.ones(100), 1)

    def test_white_noise(self):
        x = RngStream(26).normal(size=10_000)
        assert abs(autocorr(x, 1)) < 0.05

    def test_ar1(self):
        rng = RngStream(27)
        phi = 0.9
        n = 20_000
        x = np.empty(n)
        x[0] = rng.normal()
        eps = rng.normal(size=n)
        for i in range(1, n):
            x[i] = phi * x[i - 1] + eps[i]
        assert autocorr(x, 1) == pytest.approx(phi, abs=0.05)

    def test_autocorr_bounds(self):
        x = RngStream(28).normal(size=500)
        for lag in (1, 5, 20):
            assert -1.0 <= autocorr(x, lag) <= 1.0


class TestRandomSlopeRecovery:
    def test_slope_covariance_tracks_realized_effects(self):
        # information-rich clusters: the posterior mean of the random
        # coefficient covariance must match the realized effects closely
        rng = np.random.default_rng(77)
        C, per = 300, 40
        clus = np.repeat(np.arange(C), per)
        t = np.tile(np.linspace(-2, 2, per), C)
        truth = np.array([[0.5, 0.15], [0.15, 0.1]])
        b = rng.multivariate_normal([0, 0], truth, size=C)
        y = 1.0 + b[clus, 0] + b[clus, 1] * t + rng.normal(0, 0.1, C * per)
        yv = y.copy()
        yv[rng.random(C * per) < 0.15] = np.nan
        d = Dataset.build(
            [
                ColumnSpec("id", "continuous", "unit-id"),
                ColumnSpec("g", "continuous", "cluster-id"),
                ColumnSpec("t", "continuous", "analysis"),
                ColumnSpec("y", "continuous", "analysis"),
            ],
            {"id": np.arange(C * per), "g": clus, "t": t, "y": yv},
            shape_kind="wide",
        )
        spec = JmSpec(
            y_cols=("y",), x_cols=("t",), z_cols=("t",), clus="g",
            nburn=1, nbetween=1, nimp=1,
        )
        from longmi.jm import _MlmmSampler

        s = _MlmmSampler(RngStream(78), spec, d)
        rs = RngStream(79)
        psi_acc = np.zeros((2, 2))
        n_acc = 0
        for it in range(700):
            s.sweep(rs)
            if it >= 200:
                psi_acc += s.Psi
                n_acc += 1
        got = psi_acc / n_acc
        realized = b.T @ b / C
        np.testing.assert_allclose(got, realized, rtol=0.12, atol=0.01)
