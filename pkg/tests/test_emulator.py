"""Gaussian-process emulation: covariance, likelihood, fitting, prediction, CV."""

import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from warpcal.design import lhs_sample
from warpcal.emulator import (
    GPHyperParams,
    GPModel,
    TrainingSet,
    cov_exponential,
    crps_lognormal,
    crps_normal,
    gp_fit_mle,
    gp_neg_log_lik,
    gp_predict,
    load_models,
    loo_cv,
    save_models,
)

UNIT_BOUNDS = ((0.0, 1.0), (0.0, 1.0))


def draw_gp(theta, hyper, beta, rng):
    """Sample one realization of the emulator's own model class."""
    x = np.column_stack([np.ones(len(theta)), theta])
    cov = np.array([[cov_exponential(a, b, hyper) for b in theta] for a in theta])
    return x @ beta + np.linalg.cholesky(cov) @ rng.standard_normal(len(theta))


class TestCovariance:
    def test_same_point_gives_sill_plus_nugget(self):
        h = GPHyperParams(rho=(0.5, 2.0), sigma2=3.0, tau2=0.25)
        assert cov_exponential((0.3, 0.7), (0.3, 0.7), h) == pytest.approx(3.25, abs=1e-15)

    def test_unit_separation_value(self):
        h = GPHyperParams(rho=(1.0, 1.0), sigma2=1.0, tau2=0.0)
        assert cov_exponential((1.0, 0.0), (0.0, 0.0), h) == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_monotone_decay(self):
        h = GPHyperParams(rho=(0.7,), sigma2=2.0, tau2=0.0)
        values = [cov_exponential((d,), (0.0,), h) for d in np.linspace(0.1, 5.0, 30)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-2

    def test_positivity_validation(self):
        with pytest.raises(ValueError, match="positive"):
            GPHyperParams(rho=(0.0,), sigma2=1.0, tau2=0.0)
        with pytest.raises(ValueError, match="nonnegative"):
            GPHyperParams(rho=(1.0,), sigma2=1.0, tau2=-0.1)


class TestNegLogLik:
    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(2)
        theta = rng.random((10, 2))
        y = rng.random(10)
        ts = TrainingSet(theta=theta, metrics={"amplitude": y}, bounds=UNIT_BOUNDS)
        beta = np.array([0.3, -0.2, 0.5])
        hyper = GPHyperParams(rho=(0.4, 0.8), sigma2=1.3, tau2=0.05)
        ours = gp_neg_log_lik(ts, "amplitude", beta, hyper)

        # oracle: explicit inverse and determinant
        x = np.column_stack([np.ones(10), theta])
        cov = np.array([[cov_exponential(a, b, hyper) for b in theta] for a in theta])
        resid = y - x @ beta
        sign, logdet = np.linalg.slogdet(cov)
        expected = 0.5 * (10 * math.log(2 * math.pi) + logdet + resid @ np.linalg.inv(cov) @ resid)
        assert ours == pytest.approx(expected, abs=1e-8)

    def test_single_point_reduces_to_univariate_normal(self):
        ts = TrainingSet(theta=[[0.5]], metrics={"amplitude": [0.8]}, bounds=((0.0, 1.0),))
        beta = np.array([0.2, 0.1])
        hyper = GPHyperParams(rho=(1.0,), sigma2=0.5, tau2=0.1)
        mean = 0.2 + 0.1 * 0.5
        expected = -stats.norm.logpdf(0.8, loc=mean, scale=math.sqrt(0.6))
        assert gp_neg_log_lik(ts, "amplitude", beta, hyper) == pytest.approx(expected, abs=1e-12)

    def test_mean_shift_invariance(self):
        rng = np.random.default_rng(3)
        theta = rng.random((8, 1))
        y = rng.random(8)
        hyper = GPHyperParams(rho=(0.5,), sigma2=1.0, tau2=0.01)
        beta = np.array([0.1, 0.4])
        base = gp_neg_log_lik(
            TrainingSet(theta=theta, metrics={"phase": y}, bounds=((0.0, 1.0),)),
            "phase", beta, hyper,
        )
        shifted = gp_neg_log_lik(
            TrainingSet(theta=theta, metrics={"phase": y + 5.0}, bounds=((0.0, 1.0),)),
            "phase", beta + np.array([5.0, 0.0]), hyper,
        )
        assert shifted == pytest.approx(base, abs=1e-10)

    def test_non_positive_definite_signalled(self):
        # duplicated points with no nugget make the covariance singular
        ts = TrainingSet(
            theta=[[0.5], [0.5], [0.1]],
            metrics={"amplitude": [1.0, 2.0, 3.0]},
            bounds=((0.0, 1.0),),
        )
        hyper = GPHyperParams(rho=(1.0,), sigma2=1.0, tau2=0.0)
        with pytest.raises(ValueError, match="positive definite"):
            gp_neg_log_lik(ts, "amplitude", np.zeros(2), hyper)


class TestFit:
    def make_training(self, n=24, seed=0):
        rng = np.random.default_rng(seed)
        design = lhs_sample(n, UNIT_BOUNDS, seed=seed)
        values = (
            1.0
            + np.sin(3.0 * design.values[:, 0])
            + 0.5 * design.values[:, 1] ** 2
            + 0.01 * rng.standard_normal(n)
        )
        return TrainingSet(
            theta=design.values, metrics={"amplitude": values + 2.0}, bounds=UNIT_BOUNDS
        )

    def test_requires_enough_points(self):
        ts = TrainingSet(theta=[[0.1, 0.2], [0.4, 0.5], [0.9, 0.6]],
                         metrics={"amplitude": [1.0, 2.0, 1.5]}, bounds=UNIT_BOUNDS)
        with pytest.raises(ValueError, match="d\\+2"):
            gp_fit_mle(ts, "amplitude")

    def test_fit_beats_heuristic_start(self):
        ts = self.make_training()
        model = gp_fit_mle(ts, "amplitude", n_restarts=4, seed=1)
        fitted_nll = gp_neg_log_lik(ts, "amplitude", model.beta, model.hyper)
        # the first restart starts from this heuristic
        x = ts.covariates(ts.standardize(ts.theta))
        coef, *_ = np.linalg.lstsq(x, ts.metrics["amplitude"], rcond=None)
        resid_var = max(float(np.var(ts.metrics["amplitude"] - x @ coef)), 1e-10)
        start_hyper = GPHyperParams(
            rho=(0.5, 0.5), sigma2=resid_var, tau2=resid_var * (1e-8 + 1e-2)
        )
        _, start_beta = _gls_beta(ts, "amplitude", start_hyper)
        start_nll = gp_neg_log_lik(ts, "amplitude", start_beta, start_hyper)
        assert fitted_nll <= start_nll + 1e-9

    def test_small_fixed_nugget_interpolates(self):
        ts = self.make_training()
        model = gp_fit_mle(ts, "amplitude", fix_tau2=1e-10, n_restarts=3, seed=0)
        for point, value in zip(ts.theta, ts.metrics["amplitude"]):
            assert gp_predict(model, point).mean == pytest.approx(value, abs=1e-6)

    def test_range_recovery_simulation(self):
        # within-model check: fitted ranges within a factor 2 of truth in most replicates
        hyper = GPHyperParams(rho=(0.3, 0.4), sigma2=1.0, tau2=1e-4)
        beta = np.array([1.0, 2.0, -1.0])
        hits = 0
        for rep in range(20):
            rng = np.random.default_rng(100 + rep)
            theta = lhs_sample(200, UNIT_BOUNDS, seed=200 + rep).values
            y = draw_gp(theta, hyper, beta, rng)
            ts = TrainingSet(theta=theta, metrics={"phase": y - y.min() + 0.1}, bounds=UNIT_BOUNDS)
            model = gp_fit_mle(ts, "phase", n_restarts=2, seed=rep)
            ratios = np.array(model.hyper.rho) / np.array(hyper.rho)
            if np.all((ratios > 0.5) & (ratios < 2.0)):
                hits += 1
        assert hits >= 14  # 70% of 20


def _gls_beta(ts, metric, hyper):
    from warpcal.emulator import _cov_matrix, _profiled_fit

    theta_std = ts.standardize(ts.theta)
    x = ts.covariates(theta_std)
    return _profiled_fit(ts.metrics[metric], x, _cov_matrix(theta_std, hyper))


class TestPredict:
    def exact_model(self, theta, y, hyper, beta, bounds=UNIT_BOUNDS):
        ts = TrainingSet(theta=theta, metrics={"amplitude": y}, bounds=bounds)
        return GPModel(beta=np.asarray(beta, dtype=float), hyper=hyper,
                       transform="identity", metric="amplitude", training=ts)

    def test_zero_nugget_interpolates_exactly(self):
        rng = np.random.default_rng(7)
        theta = lhs_sample(12, UNIT_BOUNDS, seed=3).values
        y = rng.random(12)
        model = self.exact_model(theta, y, GPHyperParams(rho=(0.5, 0.5), sigma2=1.0, tau2=0.0),
                                 beta=[0.0, 0.0, 0.0])
        for point, value in zip(theta, y):
            pred = gp_predict(model, point)
            assert pred.mean == pytest.approx(value, abs=1e-8)
            assert pred.var == pytest.approx(0.0, abs=1e-8)

    def test_far_from_data_reverts_to_linear_mean(self):
        theta = lhs_sample(10, UNIT_BOUNDS, seed=5).values
        y = np.linspace(1.0, 2.0, 10)
        beta = np.array([0.7, 0.2, -0.3])
        hyper = GPHyperParams(rho=(0.2, 0.2), sigma2=1.5, tau2=0.3)
        model = self.exact_model(theta, y, hyper, beta)
        far = np.array([40.0, -40.0])
        pred = gp_predict(model, far)
        x = np.concatenate([[1.0], model.training.standardize(far)])
        assert pred.mean == pytest.approx(float(x @ beta), rel=1e-10)
        assert pred.var == pytest.approx(1.8, rel=1e-10)
        assert pred.extrapolated

    def test_single_point_closed_form(self):
        # 1-point kriging: m(t) = x beta + c (y - x1 beta), v = 1 - c^2
        beta = np.array([0.5, 1.0, -2.0])
        hyper = GPHyperParams(rho=(1.0, 1.0), sigma2=1.0, tau2=0.0)
        point = np.array([0.2, 0.6])
        y1 = 1.7
        model = self.exact_model([point], [y1], hyper, beta)
        t = np.array([0.5, 0.1])
        pred = gp_predict(model, t)
        c = math.exp(-(abs(0.5 - 0.2) + abs(0.1 - 0.6)))
        x_t = 0.5 + 1.0 * 0.5 - 2.0 * 0.1
        x_1 = 0.5 + 1.0 * 0.2 - 2.0 * 0.6
        assert pred.mean == pytest.approx(x_t + c * (y1 - x_1), abs=1e-10)
        assert pred.var == pytest.approx(1.0 - c * c, abs=1e-10)

    def test_reorder_invariance(self):
        rng = np.random.default_rng(11)
        theta = lhs_sample(15, UNIT_BOUNDS, seed=9).values
        y = rng.random(15) + 0.5
        hyper = GPHyperParams(rho=(0.4, 0.7), sigma2=0.9, tau2=0.02)
        beta = np.array([0.1, 0.2, 0.3])
        perm = rng.permutation(15)
        a = self.exact_model(theta, y, hyper, beta)
        b = self.exact_model(theta[perm], y[perm], hyper, beta)
        for t in rng.random((6, 2)):
            assert gp_predict(a, t).mean == pytest.approx(gp_predict(b, t).mean, abs=1e-10)
            assert gp_predict(a, t).var == pytest.approx(gp_predict(b, t).var, abs=1e-10)

    def test_log_transform_back_maps_moments(self):
        rng = np.random.default_rng(13)
        theta = lhs_sample(10, UNIT_BOUNDS, seed=13).values
        y = np.exp(rng.standard_normal(10))
        ts = TrainingSet(theta=theta, metrics={"phase": y}, bounds=UNIT_BOUNDS)
        model = GPModel(beta=np.zeros(3), hyper=GPHyperParams(rho=(0.5, 0.5), sigma2=1.0, tau2=0.1),
                        transform="log", metric="phase", training=ts)
        pred = gp_predict(model, np.array([0.42, 0.58]))
        assert pred.mean == pytest.approx(math.exp(pred.latent_mean + pred.latent_var / 2), rel=1e-12)
        assert pred.var == pytest.approx(
            math.expm1(pred.latent_var) * math.exp(2 * pred.latent_mean + pred.latent_var), rel=1e-12
        )


class TestCRPS:
    def crps_quadrature(self, cdf, y, lo, hi):
        left, _ = integrate.quad(lambda x: cdf(x) ** 2, lo, y, limit=200)
        right, _ = integrate.quad(lambda x: (1 - cdf(x)) ** 2, y, hi, limit=200)
        return left + right

    def test_normal_crps_matches_quadrature(self):
        mu, var, y = 0.4, 0.49, 1.1
        oracle = self.crps_quadrature(lambda x: stats.norm.cdf(x, mu, math.sqrt(var)), y, -10, 12)
        assert crps_normal(mu, var, y) == pytest.approx(oracle, abs=1e-8)

    def test_lognormal_crps_matches_quadrature(self):
        mu, var, y = -0.3, 0.36, 1.4
        cdf = lambda x: stats.lognorm.cdf(x, s=math.sqrt(var), scale=math.exp(mu))
        oracle = self.crps_quadrature(cdf, y, 0.0, 60.0)
        assert crps_lognormal(mu, var, y) == pytest.approx(oracle, abs=1e-8)


class TestLooCV:
    def test_within_model_coverage(self):
        # data generated from the fitted model class at N=80
        hyper = GPHyperParams(rho=(0.3, 0.5), sigma2=1.0, tau2=1e-4)
        beta = np.array([2.0, 1.0, -0.5])
        rng = np.random.default_rng(21)
        theta = lhs_sample(80, UNIT_BOUNDS, seed=21).values
        y = draw_gp(theta, hyper, beta, rng)
        ts = TrainingSet(theta=theta, metrics={"amplitude": y - y.min() + 0.5}, bounds=UNIT_BOUNDS)
        report = loo_cv(ts, "amplitude", transforms=("identity",), n_restarts=3, seed=2)
        coverage = report.candidate("identity").coverage
        assert 0.85 <= coverage <= 1.0

    def test_log_selected_for_lognormal_metrics(self):
        hyper = GPHyperParams(rho=(0.4, 0.4), sigma2=1.44, tau2=1e-3)
        beta = np.array([0.0, 1.0, 1.0])
        picks = 0
        for rep in range(20):
            rng = np.random.default_rng(300 + rep)
            theta = lhs_sample(40, UNIT_BOUNDS, seed=400 + rep).values
            y = np.exp(draw_gp(theta, hyper, beta, rng))
            ts = TrainingSet(theta=theta, metrics={"phase": y}, bounds=UNIT_BOUNDS)
            report = loo_cv(ts, "phase", n_restarts=2, seed=rep)
            picks += report.selected == "log"
        assert picks >= 16  # 80% of 20

    def test_constant_metrics_zero_rmse_under_identity(self):
        theta = lhs_sample(12, UNIT_BOUNDS, seed=31).values
        ts = TrainingSet(theta=theta, metrics={"amplitude": np.full(12, 2.0)}, bounds=UNIT_BOUNDS)
        report = loo_cv(ts, "amplitude", transforms=("identity",), n_restarts=2, seed=0)
        assert report.candidate("identity").rmse == pytest.approx(0.0, abs=1e-6)

    def test_nonpositive_metric_skips_log(self):
        theta = lhs_sample(10, UNIT_BOUNDS, seed=41).values
        values = np.linspace(0.0, 1.0, 10)  # contains a zero
        ts = TrainingSet(theta=theta, metrics={"amplitude": values}, bounds=UNIT_BOUNDS)
        report = loo_cv(ts, "amplitude", n_restarts=2, seed=0)
        assert "log" in report.skipped
        assert report.selected == "identity"

    def test_needs_five_points(self):
        theta = lhs_sample(4, UNIT_BOUNDS, seed=0).values
        ts = TrainingSet(theta=theta, metrics={"amplitude": np.ones(4)}, bounds=UNIT_BOUNDS)
        with pytest.raises(ValueError, match="at least 5"):
            loo_cv(ts, "amplitude")


class TestSerialization:
    def test_round_trip_reproduces_predictions(self, tmp_path):
        rng = np.random.default_rng(17)
        theta = lhs_sample(20, UNIT_BOUNDS, seed=17).values
        metrics = {
            "amplitude": rng.random(20) + 1.0,
            "phase": np.exp(rng.standard_normal(20)),
        }
        ts = TrainingSet(theta=theta, metrics=metrics, bounds=UNIT_BOUNDS)
        models = {
            "amplitude": gp_fit_mle(ts, "amplitude", n_restarts=2, seed=0),
            "phase": gp_fit_mle(ts, "phase", transform="log", n_restarts=2, seed=0),
        }
        path = save_models(tmp_path / "models.json", models, metrics_table="metrics.csv")
        with open(path) as f:
            assert json.load(f)["metrics_table"] == "metrics.csv"
        loaded = load_models(path)
        for metric in models:
            for t in rng.random((8, 2)):
                a = gp_predict(models[metric], t)
                b = gp_predict(loaded[metric], t)
                assert b.mean == pytest.approx(a.mean, abs=1e-12)
                assert b.var == pytest.approx(a.var, abs=1e-12)

    def test_log_transform_requires_positive_metrics(self):
        theta = lhs_sample(10, UNIT_BOUNDS, seed=2).values
        ts = TrainingSet(theta=theta, metrics={"amplitude": np.zeros(10)}, bounds=UNIT_BOUNDS)
        with pytest.raises(ValueError, match="strictly positive"):
            gp_fit_mle(ts, "amplitude", transform="log", n_restarts=2)
