import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpr_acr.bacl import (
    BAYESIAN,
    DETERMINISTIC,
    BaclModel,
    Hyperparameters,
    TrainingError,
    draw_noise,
    fit_lane_model,
    gradient_step,
    kl_divergence,
    loss_and_grads,
    negative_elbo,
    predict,
    sample_weights,
    softplus,
    train,
)
from lpr_acr.features import FeatureSpec, TrainingSample

from oracles import finite_difference_grads, gaussian_kl_mc, max_relative_error


def tiny(mode=BAYESIAN, hidden=(1,), n_in=2, seed=0, **kw):
    hyper = Hyperparameters(hidden=hidden, init_mu=0.5, init_rho=-1.0, **kw)
    return BaclModel.create(n_in, hyper, mode=mode, seed=seed)


def batch(n=5, n_in=2, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, n_in)), rng.normal(size=n)


class TestGradients:
    @pytest.mark.parametrize("mode", [BAYESIAN, DETERMINISTIC])
    @pytest.mark.parametrize("hidden", [(1,), (3, 2)])
    def test_matches_finite_differences(self, mode, hidden):
        m = tiny(mode, hidden)
        Z, y = batch()
        eps = draw_noise(m, 2, np.random.default_rng(5))
        _, g = loss_and_grads(m, Z, y, eps, 0.3)
        assert max_relative_error(g, finite_difference_grads(m, Z, y, eps, 0.3)) < 1e-4

    def test_homoscedastic_head(self):
        m = tiny(heteroscedastic=False, fixed_sigma=0.7)
        Z, y = batch()
        eps = draw_noise(m, 1, np.random.default_rng(2))
        _, g = loss_and_grads(m, Z, y, eps, 1.0)
        assert max_relative_error(g, finite_difference_grads(m, Z, y, eps, 1.0)) < 1e-4

    def test_scaled_output(self):
        m = tiny()
        m.out_shift, m.out_scale = 4.0, 3.0
        Z, y = batch()
        y = 4 + 3 * y
        eps = draw_noise(m, 3, np.random.default_rng(9))
        _, g = loss_and_grads(m, Z, y, eps, 0.1)
        assert max_relative_error(g, finite_difference_grads(m, Z, y, eps, 0.1)) < 1e-4

    def test_deterministic_rho_gradient_zero(self):
        m = tiny(DETERMINISTIC)
        Z, y = batch()
        _, g = loss_and_grads(m, Z, y, draw_noise(m, 1, np.random.default_rng(0)), 1.0)
        assert all(np.all(x == 0) for x in g[1::2])

    def test_gradient_step_lowers_loss(self):
        m = tiny(hidden=(4,))
        Z, y = batch(20)
        eps = draw_noise(m, 1, np.random.default_rng(3))
        before = negative_elbo(m, Z, y, eps, 0.5)
        after = negative_elbo(gradient_step(m, Z, y, eps, 0.5, 1e-3), Z, y, eps, 0.5)
        assert after < before


class TestWeightsAndKl:
    def test_reparameterization(self):
        m = tiny()
        eps = draw_noise(m, 1, np.random.default_rng(0))
        (W, b), _ = sample_weights(m, eps)
        l0 = m.layers[0]
        np.testing.assert_allclose(W, l0.w_mu + softplus(l0.w_rho) * eps[0][0])

    def test_softplus_stable(self):
        assert softplus(np.array([-800.0]))[0] >= 0
        assert softplus(np.array([800.0]))[0] == pytest.approx(800.0)

    def test_kl_zero_at_prior(self):
        m = tiny()
        rho0 = np.log(np.expm1(1.0))
        for p in m.params()[0::2]:
            p[...] = 0.0
        for p in m.params()[1::2]:
            p[...] = rho0
        assert kl_divergence(m) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-2, 2), st.floats(-4, 1))
    def test_kl_matches_monte_carlo(self, mu, rho):
        m = BaclModel.create(1, Hyperparameters(hidden=(), prior_std=1.3))
        m.layers[0].w_mu[...] = mu
        m.layers[0].w_rho[...] = rho
        # isolate one weight: bias terms set to the prior
        m.layers[0].b_mu[...] = 0.0
        m.layers[0].b_rho[...] = np.log(np.expm1(1.3))
        mc = 2 * gaussian_kl_mc(mu, float(softplus(rho)), 1.3, np.random.default_rng(0))
        assert kl_divergence(m) == pytest.approx(mc, abs=0.02 + 0.01 * abs(mc))

    def test_kl_non_negative(self):
        assert kl_divergence(tiny(hidden=(5,))) >= 0


def toy_samples(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(0, 20, n), rng.uniform(0, 120, n), rng.uniform(1, 60, n)])
    y = 0.5 * X[:, 0] + rng.normal(0, 0.5, n)
    return [TrainingSample("down:X", X[i], float(y[i])) for i in range(n)], FeatureSpec(("up:A",))


class TestTraining:
    hyper = Hyperparameters(hidden=(8,), epochs=80, patience=80)

    def test_learns_linear_share(self):
        s, spec = toy_samples()
        r = fit_lane_model(s, spec, self.hyper, seed=1)
        assert r.loss_trace[-1] < r.loss_trace[0]
        pd = predict(r.model, np.array([[10.0, 60.0, 30.0]]), 200)
        assert pd.mean[0] == pytest.approx(5.0, abs=0.7)

    def test_reproducible(self):
        s, spec = toy_samples(150)
        h = Hyperparameters(hidden=(4,), epochs=10)
        a = fit_lane_model(s, spec, h, seed=3)
        b = fit_lane_model(s, spec, h, seed=3)
        assert a.loss_trace == b.loss_trace
        assert all(np.array_equal(p, q) for p, q in zip(a.model.params(), b.model.params()))

    def test_early_stopping_restores_best(self):
        s, spec = toy_samples(200)
        r = fit_lane_model(s, spec, Hyperparameters(hidden=(4,), epochs=300, patience=5), seed=0)
        assert r.stopped_early and len(r.val_trace) == r.best_epoch + 6

    def test_width_mismatch(self):
        s, _ = toy_samples(10)
        with pytest.raises(ValueError):
            fit_lane_model(s, FeatureSpec(("a", "b")))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        s, spec = toy_samples(100)
        with pytest.raises(TrainingError):
            fit_lane_model(s, spec, Hyperparameters(hidden=(4,), epochs=50, optimizer="sgd", learning_rate=1e3), seed=0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            train(tiny(), np.empty((0, 2)), np.empty(0))


@pytest.fixture(scope="module")
def fitted():
    s, spec = toy_samples(300)
    return fit_lane_model(s, spec, Hyperparameters(hidden=(8,), epochs=40), seed=2).model


class TestPredict:
    def test_deterministic_calls(self, fitted):
        X = np.array([[3.0, 10.0, 5.0], [15.0, 90.0, 50.0]])
        a, b = predict(fitted, X), predict(fitted, X)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var_epistemic, b.var_epistemic)

    def test_variances_non_negative(self, fitted):
        X = np.random.default_rng(0).uniform(0, 50, (50, 3))
        pd = predict(fitted, X)
        assert np.all(pd.var_epistemic >= 0) and np.all(pd.var_aleatoric > 0)
        assert np.all(pd.mean >= 0)
        np.testing.assert_allclose(pd.std**2, pd.var_total)

    def test_deterministic_mode_no_epistemic(self):
        s, spec = toy_samples(100)
        m = fit_lane_model(s, spec, Hyperparameters(hidden=(4,), epochs=5), DETERMINISTIC).model
        assert np.all(predict(m, np.array([[1.0, 2.0, 3.0]]), 50).var_epistemic == 0)

    def test_bad_sample_count(self, fitted):
        with pytest.raises(ValueError):
            predict(fitted, np.zeros((1, 3)), -1)

    def test_save_load_round_trip(self, fitted, tmp_path):
        fitted.save(tmp_path / "m.json")
        back = BaclModel.load(tmp_path / "m.json")
        X = np.array([[3.0, 10.0, 5.0]])
        np.testing.assert_array_equal(predict(back, X).mean, predict(fitted, X).mean)

    def test_load_rejects_bad_shapes(self, fitted, tmp_path):
        d = fitted.to_dict()
        d["shapes"][0] = [5, 8]
        with pytest.raises(ValueError):
            BaclModel.from_dict(json.loads(json.dumps(d)))
        d = fitted.to_dict()
        d["version"] = 99
        with pytest.raises(ValueError):
            BaclModel.from_dict(d)


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        Hyperparameters(optimizer="lbfgs")
