import math

import numpy as np
import pytest

from memdream.evaluation import spearman
from memdream.regression import (
    BayesianRidgeModel,
    HeadModel,
    RegressionError,
    TrainConfig,
    TrainingDivergedError,
    fit_bayesian_ridge,
    fit_head,
    grad_check,
    load_bayesian_ridge,
    load_head,
    one_cycle_lr,
    predict_bayesian_ridge,
    predict_head,
    save_bayesian_ridge,
    save_head,
)


def planted_problem(seed=0, n=200, d=3, w=None, intercept=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = np.array([1.0, -2.0, 0.5]) if w is None else np.asarray(w)
    return X, X @ w + intercept, w


def ridge_oracle(X, y, alpha, lam):
    """Direct regularized solve on centered data: the closed form the
    iterative fit must agree with at its final precisions."""
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    d = X.shape[1]
    return np.linalg.solve(alpha * Xc.T @ Xc + lam * np.eye(d), alpha * Xc.T @ yc)


class TestFitBayesianRidge:
    def test_constant_target(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(40, 4))
        model = fit_bayesian_ridge(X, np.full(40, 0.7))
        assert np.linalg.norm(model.weights) < 1e-6
        assert model.intercept == pytest.approx(0.7, abs=1e-9)

    def test_planted_weights_recovered(self):
        X, y, w_true = planted_problem()
        model = fit_bayesian_ridge(X, y)
        assert model.weights == pytest.approx(w_true, abs=1e-3)
        assert model.converged

    def test_oracle_equivalence(self):
        """Fitted weights must solve the ridge system at the stored precisions."""
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(5, 120))
            d = int(rng.integers(1, 12))
            X = rng.normal(size=(n, d))
            y = rng.normal(size=n)
            model = fit_bayesian_ridge(X, y)
            expected = ridge_oracle(X, y, model.alpha, model.lambda_)
            scale = max(1.0, float(np.linalg.norm(expected)))
            assert np.linalg.norm(model.weights - expected) / scale < 1e-8

    def test_fixed_point_at_convergence(self):
        """One more precision update moves alpha and lambda by < 10*tol."""
        X, y, _ = planted_problem(seed=5)
        y = y + np.random.default_rng(6).normal(scale=0.1, size=y.shape)
        model = fit_bayesian_ridge(X, y)
        assert model.converged
        Xc = X - X.mean(axis=0)
        yc = y - y.mean()
        s2 = np.linalg.svd(Xc, compute_uv=False) ** 2
        gamma = float(np.sum(s2 / (s2 + model.lambda_ / model.alpha)))
        sse = float(np.sum((yc - Xc @ model.weights) ** 2))
        lam_next = (gamma + 2e-6) / (float(model.weights @ model.weights) + 2e-6)
        alpha_next = (X.shape[0] - gamma + 2e-6) / (sse + 2e-6)
        assert abs(lam_next - model.lambda_) / model.lambda_ < 1e-2
        assert abs(alpha_next - model.alpha) / model.alpha < 1e-2

    def test_scaling_property(self):
        """y -> c*y scales weights, intercept, and predictions by c; the
        Spearman of predictions is untouched."""
        rng = np.random.default_rng(2)
        X = rng.normal(size=(80, 4))
        y = X @ np.array([0.5, -1.0, 2.0, 0.25]) + 2.0
        c = 3.0
        base = fit_bayesian_ridge(X, y)
        scaled = fit_bayesian_ridge(X, c * y)
        assert scaled.weights == pytest.approx(c * base.weights, rel=1e-6)
        assert scaled.intercept == pytest.approx(c * base.intercept, rel=1e-6)
        X_new = rng.normal(size=(30, 4))
        mean_base, _ = predict_bayesian_ridge(base, X_new)
        mean_scaled, _ = predict_bayesian_ridge(scaled, X_new)
        assert mean_scaled == pytest.approx(c * mean_base, rel=1e-6)
        assert spearman(mean_scaled, np.arange(30.0)) == spearman(mean_base, np.arange(30.0))

    def test_underdetermined_problem_is_well_posed(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(6, 10))  # n < d
        model = fit_bayesian_ridge(X, rng.normal(size=6))
        eigvals = np.linalg.eigvalsh(model.posterior_covariance)
        assert eigvals.min() > 0.0
        mean, std = predict_bayesian_ridge(model, rng.normal(size=(4, 10)))
        assert np.all(np.isfinite(mean)) and np.all(np.isfinite(std))

    def test_non_finite_input(self):
        X = np.ones((4, 2))
        X[2, 1] = np.inf
        with pytest.raises(RegressionError, match="non-finite"):
            fit_bayesian_ridge(X, np.ones(4))

    def test_too_few_rows(self):
        with pytest.raises(RegressionError, match="at least 2"):
            fit_bayesian_ridge(np.ones((1, 2)), np.ones(1))

    def test_model_validation(self):
        with pytest.raises(RegressionError, match="precisions"):
            BayesianRidgeModel(
                weights=np.zeros(2), intercept=0.0, alpha=-1.0, lambda_=1.0,
                posterior_covariance=np.eye(2), x_means=np.zeros(2), y_mean=0.0,
                n_iterations_run=1, converged=True,
            )
        lopsided = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(RegressionError, match="asymmetric"):
            BayesianRidgeModel(
                weights=np.zeros(2), intercept=0.0, alpha=1.0, lambda_=1.0,
                posterior_covariance=lopsided, x_means=np.zeros(2), y_mean=0.0,
                n_iterations_run=1, converged=True,
            )


class TestPredictBayesianRidge:
    def test_training_rows_of_planted_fit(self):
        X, y, _ = planted_problem()
        model = fit_bayesian_ridge(X, y)
        mean, _ = predict_bayesian_ridge(model, X[:10])
        assert mean == pytest.approx(y[:10], abs=1e-3)

    def test_std_lower_bound(self):
        X, y, _ = planted_problem(seed=9)
        model = fit_bayesian_ridge(X, y + 0.05 * X[:, 0] ** 2)
        _, std = predict_bayesian_ridge(model, np.random.default_rng(0).normal(size=(50, 3)))
        assert np.all(std >= math.sqrt(1.0 / model.alpha) - 1e-12)

    def test_mean_feature_row_predicts_mean_target(self):
        X, y, _ = planted_problem(seed=4)
        model = fit_bayesian_ridge(X, y)
        mean, _ = predict_bayesian_ridge(model, model.x_means[None, :])
        assert mean[0] == model.y_mean

    def test_dimension_mismatch(self):
        X, y, _ = planted_problem()
        model = fit_bayesian_ridge(X, y)
        with pytest.raises(RegressionError, match="columns"):
            predict_bayesian_ridge(model, np.zeros((2, 5)))


class TestRidgeStore:
    def test_round_trip(self, tmp_path):
        X, y, _ = planted_problem(seed=12)
        model = fit_bayesian_ridge(X, y)
        p = tmp_path / "model.brr1"
        save_bayesian_ridge(model, p)
        loaded = load_bayesian_ridge(p)
        assert np.array_equal(loaded.weights, model.weights)
        assert np.array_equal(loaded.x_means, model.x_means)
        assert np.array_equal(loaded.posterior_covariance, model.posterior_covariance)
        assert loaded.intercept == model.intercept
        assert loaded.alpha == model.alpha
        assert loaded.lambda_ == model.lambda_
        assert loaded.y_mean == model.y_mean
        assert loaded.n_iterations_run == model.n_iterations_run
        assert loaded.converged == model.converged

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "model.brr1"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(RegressionError, match="bad magic"):
            load_bayesian_ridge(p)

    def test_truncated(self, tmp_path):
        X, y, _ = planted_problem(seed=12)
        p = tmp_path / "model.brr1"
        save_bayesian_ridge(fit_bayesian_ridge(X, y), p)
        data = p.read_bytes()
        p.write_bytes(data[:10])
        with pytest.raises(RegressionError, match="truncated header"):
            load_bayesian_ridge(p)
        p.write_bytes(data[:-8])
        with pytest.raises(RegressionError, match="payload"):
            load_bayesian_ridge(p)


class TestOneCycle:
    def test_endpoints_and_peak(self):
        lrs = [one_cycle_lr(s, 100, 1e-3) for s in range(100)]
        assert lrs[0] == pytest.approx(4e-5)
        assert max(lrs) == pytest.approx(1e-3)
        assert lrs.index(max(lrs)) == 30  # warmup ends at 30% of steps
        assert lrs[-1] == pytest.approx(4e-5)
        assert all(lr > 0 for lr in lrs)

    def test_monotone_warmup_then_decay(self):
        lrs = [one_cycle_lr(s, 100, 1e-3) for s in range(100)]
        assert all(a < b for a, b in zip(lrs[:30], lrs[1:31]))
        assert all(a > b for a, b in zip(lrs[30:-1], lrs[31:]))

    def test_single_step_schedule(self):
        assert one_cycle_lr(0, 1, 1e-3) > 0

    def test_step_out_of_range(self):
        with pytest.raises(RegressionError, match="outside"):
            one_cycle_lr(100, 100, 1e-3)
        with pytest.raises(RegressionError, match="outside"):
            one_cycle_lr(-1, 100, 1e-3)


class TestFitHead:
    def test_constant_target_learned_by_bias(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(64, 6))
        y = np.full(64, 0.37)
        cfg = TrainConfig(epochs=1500, max_lr=1e-2, weight_decay=0.0, batch_size=64, seed=0)
        model, _ = fit_head(X, y, cfg, hidden_width=64)
        assert model.final_train_mse < 1e-6

    def test_planted_linear_data(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(96, 5))
        y = 0.1 * (X @ rng.normal(size=5)) + 0.5
        cfg = TrainConfig(epochs=800, max_lr=1e-2, weight_decay=0.0, batch_size=32, seed=3)
        model, trace = fit_head(X, y, cfg, hidden_width=64)
        assert model.final_train_mse < float(y.var()) / 100
        assert np.all(np.isfinite(trace.losses))

    def test_deterministic_bit_for_bit(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(32, 4))
        y = rng.uniform(size=32)
        cfg = TrainConfig(epochs=5, seed=11)
        a, _ = fit_head(X, y, cfg, hidden_width=16)
        b, _ = fit_head(X, y, cfg, hidden_width=16)
        assert np.array_equal(a.w1, b.w1)
        assert np.array_equal(a.b1, b.b1)
        assert np.array_equal(a.w2, b.w2)
        assert a.b2 == b.b2
        assert a.final_train_mse == b.final_train_mse

    def test_seed_changes_parameters(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(32, 4))
        y = rng.uniform(size=32)
        a, _ = fit_head(X, y, TrainConfig(epochs=2, seed=1), hidden_width=8)
        b, _ = fit_head(X, y, TrainConfig(epochs=2, seed=2), hidden_width=8)
        assert not np.array_equal(a.w1, b.w1)

    def test_trace_shapes_match_schedule(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(10, 3))
        y = rng.uniform(size=10)
        cfg = TrainConfig(epochs=4, batch_size=4)  # 3 batches per epoch
        _, trace = fit_head(X, y, cfg, hidden_width=4)
        assert trace.losses.shape == (12,)
        assert trace.lrs.shape == (12,)
        assert trace.lrs.max() == pytest.approx(cfg.max_lr)

    def test_weight_decay_shrinks_weights_on_null_task(self):
        """Zero inputs and zero targets leave only the decay term, so the
        weight norm must fall at every step."""
        X = np.zeros((8, 4))
        y = np.zeros(8)
        cfg = TrainConfig(epochs=6, max_lr=1e-2, weight_decay=0.1, batch_size=8, seed=1)
        _, trace = fit_head(X, y, cfg, hidden_width=4)
        assert np.all(np.diff(trace.weight_norms) < 0)

    def test_divergence_is_reported_with_step(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(8, 3))
        y = np.ones(8)
        cfg = TrainConfig(epochs=2, max_lr=1e200, weight_decay=0.0, batch_size=4, seed=0)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="non-finite loss at step"):
            fit_head(X, y, cfg, hidden_width=4)

    def test_zero_hidden_width_unsupported(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(8, 3))
        with pytest.raises(RegressionError, match="unsupported"):
            fit_head(X, np.ones(8), TrainConfig(), hidden_width=0)
        with pytest.raises(RegressionError, match="unsupported"):
            HeadModel(
                w1=np.zeros((3, 0)), b1=np.zeros(0), w2=np.zeros(0), b2=0.0,
                config=TrainConfig(), final_train_mse=0.0,
            )

    def test_config_validation(self):
        with pytest.raises(RegressionError, match="epochs"):
            TrainConfig(epochs=0)
        with pytest.raises(RegressionError, match="max_lr"):
            TrainConfig(max_lr=0.0)
        with pytest.raises(RegressionError, match="weight_decay"):
            TrainConfig(weight_decay=-0.1)


class TestGradCheck:
    def _random_model(self, seed, d=10, h=6, wd=1e-2):
        rng = np.random.default_rng(seed)
        return HeadModel(
            w1=rng.normal(scale=0.5, size=(d, h)),
            b1=rng.normal(scale=0.1, size=h),
            w2=rng.normal(scale=0.5, size=h),
            b2=float(rng.normal()),
            config=TrainConfig(weight_decay=wd),
            final_train_mse=0.0,
        )

    def test_analytic_matches_finite_differences(self):
        for seed in (0, 1, 2):
            rng = np.random.default_rng(100 + seed)
            X = rng.normal(size=(8, 10))
            y = rng.uniform(size=8)
            assert grad_check(self._random_model(seed), X, y) < 1e-4

    def test_zero_everything_is_exact(self):
        model = HeadModel(
            w1=np.zeros((4, 3)), b1=np.zeros(3), w2=np.zeros(3), b2=0.0,
            config=TrainConfig(weight_decay=0.5), final_train_mse=0.0,
        )
        assert grad_check(model, np.zeros((5, 4)), np.zeros(5)) == 0.0


class TestPredictHead:
    def test_zero_weights_output_bias(self):
        model = HeadModel(
            w1=np.zeros((3, 2)), b1=np.zeros(2), w2=np.zeros(2), b2=0.25,
            config=TrainConfig(), final_train_mse=0.0,
        )
        out = predict_head(model, np.random.default_rng(0).normal(size=(6, 3)))
        assert np.all(out == 0.25)

    def test_clamped_to_unit_interval(self):
        model = HeadModel(
            w1=np.zeros((2, 1)), b1=np.zeros(1), w2=np.zeros(1), b2=1.2,
            config=TrainConfig(), final_train_mse=0.0,
        )
        assert np.all(predict_head(model, np.ones((3, 2))) == 1.0)
        low = HeadModel(
            w1=np.zeros((2, 1)), b1=np.zeros(1), w2=np.zeros(1), b2=-0.4,
            config=TrainConfig(), final_train_mse=0.0,
        )
        assert np.all(predict_head(low, np.ones((3, 2))) == 0.0)

    def test_batch_of_one_matches_full_batch(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(12, 5))
        y = rng.uniform(size=12)
        model, _ = fit_head(X, y, TrainConfig(epochs=3, seed=0), hidden_width=8)
        full = predict_head(model, X)
        rows = np.array([predict_head(model, X[i:i + 1])[0] for i in range(12)])
        assert full == pytest.approx(rows, abs=1e-12)

    def test_dimension_mismatch(self):
        model = HeadModel(
            w1=np.zeros((3, 2)), b1=np.zeros(2), w2=np.zeros(2), b2=0.0,
            config=TrainConfig(), final_train_mse=0.0,
        )
        with pytest.raises(RegressionError, match="columns"):
            predict_head(model, np.zeros((2, 4)))


class TestHeadStore:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(16, 4))
        y = rng.uniform(size=16)
        cfg = TrainConfig(epochs=2, max_lr=5e-3, weight_decay=0.02, batch_size=8, seed=21)
        model, _ = fit_head(X, y, cfg, hidden_width=6)
        p = tmp_path / "model.head"
        save_head(model, p)
        loaded = load_head(p)
        assert np.array_equal(loaded.w1, model.w1)
        assert np.array_equal(loaded.b1, model.b1)
        assert np.array_equal(loaded.w2, model.w2)
        assert loaded.b2 == model.b2
        assert loaded.config == cfg
        assert loaded.final_train_mse == model.final_train_mse

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "model.head"
        p.write_bytes(b"WHAT" + b"\x00" * 80)
        with pytest.raises(RegressionError, match="bad magic"):
            load_head(p)

    def test_wrong_payload_size(self, tmp_path):
        rng = np.random.default_rng(9)
        model, _ = fit_head(rng.normal(size=(8, 3)), rng.uniform(size=8), TrainConfig(epochs=1), hidden_width=4)
        p = tmp_path / "model.head"
        save_head(model, p)
        p.write_bytes(p.read_bytes() + b"\x00" * 8)
        with pytest.raises(RegressionError, match="payload"):
            load_head(p)
