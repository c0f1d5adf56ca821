import math

import numpy as np
import pytest
import scipy.linalg

from local_kernel_training.kernel_flow_regression import (
    FlowPredictor,
    RegressionTask,
    candidate_stopping_times,
    cv_guarantee_bound,
    cv_select_stopping,
    flow_predict,
    l2_risk,
    make_regression_task,
    optimal_rate_exponent,
    optimal_stopping_time,
    overfitting_probe,
    rate_scaling_experiment,
    risk_curve,
    spectral_target,
    sup_risk,
    sup_rate_exponent,
    truncate,
)
from local_ntk_spectra.ntk_kernels import NtkDescriptor, gram, ntk_kernel
from local_ntk_spectra.spectral_estimator import SampleDistribution, sample
from local_ntk_utils.errors import NotPositiveDefinite
from local_ntk_utils.general_utils import substream

DESC = NtkDescriptor(L=2)
CUBE1 = SampleDistribution(kind="uniform_cube", d=1)


@pytest.fixture
def small_problem(rng):
    X = rng.uniform(-1, 1, size=(30, 2))
    y = np.sin(2 * X[:, 0]) + 0.1 * rng.standard_normal(30)
    return X, y


def _noisy_task(seed: int, n: int, noise_sigma: float):
    rng = substream(seed, "test_task")
    kernel = ntk_kernel(DESC)
    f_star = spectral_target(kernel, sample(CUBE1, 40, rng=rng), rng=rng)
    return kernel, f_star, make_regression_task(f_star, CUBE1, n, noise_sigma, rng)


def _noisy_split(seed: int, n: int, n_hold: int, noise_sigma: float):
    """training and holdout tasks labelled by the same target"""
    kernel, f_star, task = _noisy_task(seed, n, noise_sigma)
    hold = make_regression_task(f_star, CUBE1, n_hold, noise_sigma, substream(seed, "test_holdout"))
    return kernel, f_star, task, hold


class TestFlowPredictor:
    def test_matches_matrix_exponential(self, small_problem):
        X, y = small_problem
        pred = FlowPredictor.fit(DESC, X, y)
        K = gram(DESC, X).entries
        for t in [0.5, 5.0, 80.0]:
            expected = (np.eye(len(y)) - scipy.linalg.expm(-K * t / len(y))) @ y
            np.testing.assert_allclose(pred.at(t).train_predictions(), expected, atol=1e-8 * np.linalg.norm(y))

    def test_predict_on_training_points(self, small_problem):
        X, y = small_problem
        pred = FlowPredictor.fit(DESC, X, y, t=12.0)
        np.testing.assert_allclose(pred.predict(X), pred.train_predictions(), atol=1e-9)
        assert flow_predict(pred, X[3]) == pytest.approx(pred.train_predictions()[3], abs=1e-9)

    def test_residual_identity(self, small_problem):
        X, y = small_problem
        pred = FlowPredictor.fit(DESC, X, y, t=7.0)
        K = gram(DESC, X).entries
        expected = np.linalg.norm(scipy.linalg.expm(-K * 7.0 / len(y)) @ y)
        assert abs(pred.train_residual() - expected) <= 1e-10 * max(1.0, expected)
        direct = np.linalg.norm(pred.train_predictions() - y)
        assert pred.train_residual() == pytest.approx(direct, rel=1e-8)

    def test_residual_decreases_under_envelope(self, small_problem):
        X, y = small_problem
        pred = FlowPredictor.fit(DESC, X, y)
        residuals = [pred.at(t).train_residual() for t in np.geomspace(1e-2, 1e6, 30)]
        assert np.all(np.diff(residuals) <= 1e-12)
        for t in [1.0, 100.0, 1e4]:
            assert pred.at(t).train_residual() <= pred.at(t).residual_envelope() + 1e-12

    def test_time_zero_is_zero(self, small_problem, rng):
        X, y = small_problem
        pred = FlowPredictor.fit(DESC, X, y)
        np.testing.assert_array_equal(pred.predict(rng.uniform(-1, 1, size=(5, 2))), 0.0)

    def test_time_derivative(self, small_problem, rng):
        X, y = small_problem
        Xq = rng.uniform(-1, 1, size=(6, 2))
        pred = FlowPredictor.fit(DESC, X, y, t=3.0)
        h = 1e-4
        numeric = (pred.at(3.0 + h).predict(Xq) - pred.at(3.0 - h).predict(Xq)) / (2 * h)
        np.testing.assert_allclose(numeric, pred.time_derivative(Xq), rtol=1e-5, atol=1e-9)

    def test_noiseless_interpolation(self, small_problem):
        X, _ = small_problem
        y = np.cos(X[:, 1])
        pred = FlowPredictor.fit(DESC, X, y, t=1e12)
        assert pred.train_residual() < 1e-6 * np.linalg.norm(y)

    def test_not_positive_definite(self, small_problem):
        X, y = small_problem
        with pytest.raises(NotPositiveDefinite, match="Gram not PD"):
            FlowPredictor.fit(lambda A, B: -np.ones((len(A), len(B))), X, y)

    def test_negative_time(self, small_problem):
        X, y = small_problem
        with pytest.raises(ValueError):
            FlowPredictor.fit(DESC, X, y).at(-1.0)


class TestRegressionTask:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            RegressionTask(X=np.zeros((3, 1)), y=np.zeros(4))

    def test_one_dimensional_inputs(self):
        task = RegressionTask(X=np.linspace(-1, 1, 5), y=np.arange(5))
        assert task.X.shape == (5, 1)
        assert task.n == 5

    def test_bad_truncation(self):
        with pytest.raises(ValueError):
            RegressionTask(X=np.zeros((2, 1)), y=np.zeros(2), M=0.0)


class TestStoppingTimes:
    def test_optimal_time_d1_s1(self):
        assert optimal_stopping_time(256, 1, 1.0) == pytest.approx(256 ** (2 / 3), rel=1e-12)
        assert optimal_stopping_time(256, 1, 1.0) == pytest.approx(40.3175, abs=1e-3)

    def test_smoothness_threshold(self):
        with pytest.raises(ValueError, match="smoothness below threshold"):
            optimal_stopping_time(100, 2, 1 / 3)
        with pytest.raises(ValueError, match="smoothness below threshold"):
            optimal_rate_exponent(1, 0.4)

    def test_rate_exponents(self):
        assert optimal_rate_exponent(1, 1.0) == pytest.approx(2 / 3)
        assert sup_rate_exponent(1, 2.0) == pytest.approx(2 / 5)
        with pytest.raises(ValueError):
            sup_rate_exponent(1, 1.0)

    def test_candidates(self):
        assert candidate_stopping_times(10, 2) == [1.0, 2.0, 4.0, 8.0]
        assert candidate_stopping_times(8, 2) == [1.0, 2.0, 4.0, 8.0]
        assert candidate_stopping_times(1000, 10) == [1.0, 10.0, 100.0, 1000.0]
        assert candidate_stopping_times(1, 2) == [1.0]
        with pytest.raises(ValueError):
            candidate_stopping_times(10, 1.0)


class TestTruncate:
    def test_values(self):
        assert truncate(5.0, 2.0) == 2.0
        assert truncate(-5.0, 2.0) == -2.0
        assert truncate(1.5, 2.0) == 1.5
        np.testing.assert_array_equal(truncate(np.array([-3.0, 0.0, 3.0]), 1.0), [-1.0, 0.0, 1.0])

    def test_bad_level(self):
        with pytest.raises(ValueError):
            truncate(1.0, 0.0)


class TestCrossValidation:
    def test_ties_go_to_smallest_time(self, rng):
        X = rng.uniform(-1, 1, size=(20, 1))
        pred = FlowPredictor.fit(DESC, X, np.zeros(20))
        selection = cv_select_stopping(pred, [16.0, 1.0, 4.0], rng.uniform(-1, 1, size=(10, 1)), np.zeros(10), M=1.0)
        assert selection.t_cv == 1.0
        assert list(selection.risks["t"]) == [1.0, 4.0, 16.0]

    def test_selection_is_argmin_and_truncated(self):
        _, f_star, task, hold = _noisy_split(3, 80, 80, 0.3)
        M = float(np.max(np.abs(np.concatenate([task.y, hold.y]))))
        pred = FlowPredictor.from_task(ntk_kernel(DESC), task)
        selection = cv_select_stopping(pred, candidate_stopping_times(80), hold.X, hold.y, M)
        best = selection.risks.loc[selection.risks["holdout_risk"].idxmin(), "t"]
        assert selection.t_cv == best
        assert np.all(np.abs(selection.predictor(np.linspace(-3, 3, 50)[:, None])) <= M)

    def test_empty_inputs(self, rng):
        pred = FlowPredictor.fit(DESC, rng.uniform(-1, 1, size=(5, 1)), np.ones(5))
        with pytest.raises(ValueError):
            cv_select_stopping(pred, [], np.zeros((2, 1)), np.zeros(2), M=1.0)
        with pytest.raises(ValueError):
            cv_select_stopping(pred, [1.0], np.zeros((0, 1)), np.zeros(0), M=1.0)

    def test_oracle_inequality(self):
        holds = 0
        for seed in range(50):
            kernel, f_star, task, hold = _noisy_split(seed, 100, 100, 0.3)
            M = float(np.max(np.abs(np.concatenate([task.y, hold.y]))))
            pred = FlowPredictor.from_task(kernel, task)
            candidates = candidate_stopping_times(task.n)
            selection = cv_select_stopping(pred, candidates, hold.X, hold.y, M)
            risks = [l2_risk(lambda Z, t=t: truncate(pred.at(t)(Z), M), f_star, CUBE1, n_mc=2000) for t in candidates]
            bound = cv_guarantee_bound(min(risks), M, len(candidates), hold.n, delta=0.1)
            holds += l2_risk(selection.predictor, f_star, CUBE1, n_mc=2000) <= bound
        assert holds >= 45


class TestRisks:
    def test_l2_and_sup_of_exact_predictor(self):
        def f(Z):
            return np.sin(np.asarray(Z)[:, 0])
        assert l2_risk(f, f, CUBE1, n_mc=100) == 0.0
        assert sup_risk(lambda Z: f(Z) + 0.5, f, np.linspace(-1, 1, 11)) == pytest.approx(0.25)

    def test_spectral_target_is_deterministic(self):
        kernel = ntk_kernel(DESC)
        centers = sample(CUBE1, 30, rng=np.random.default_rng(0))
        f1 = spectral_target(kernel, centers, rng=np.random.default_rng(5))
        f2 = spectral_target(kernel, centers, rng=np.random.default_rng(5))
        grid = np.linspace(-1, 1, 21)[:, None]
        np.testing.assert_array_equal(f1(grid), f2(grid))
        assert np.all(np.isfinite(f1(grid)))
        assert np.max(np.abs(f1(grid))) < 10

    def test_risk_curve_is_u_shaped(self):
        interior = 0
        times = np.geomspace(1e-2, 1e8, 21)
        for seed in range(50):
            kernel, f_star, task, hold = _noisy_split(seed, 100, 400, 0.3)
            curve = risk_curve(FlowPredictor.from_task(kernel, task), times, hold.X, hold.y)
            best = int(np.argmin(curve["holdout_risk"].to_numpy()))
            interior += 0 < best < len(times) - 1
        assert interior >= 40

    def test_risk_curve_columns(self):
        kernel, f_star, task = _noisy_task(0, 30, 0.1)
        curve = risk_curve(FlowPredictor.from_task(kernel, task), [10.0, 1.0], f_star=f_star, dist=CUBE1, n_mc=200)
        assert list(curve.columns) == ["t", "train_residual", "holdout_risk", "l2_risk"]
        assert list(curve["t"]) == [1.0, 10.0]
        assert curve["holdout_risk"].isna().all()
        assert curve["l2_risk"].notna().all()

    def test_overfitting_hurts(self):
        worse = 0
        for seed in range(20):
            risk_op, risk_over = overfitting_probe(DESC, d=1, noise_sigma=0.3, n_mc=2000, seed=seed)
            worse += risk_op < risk_over
        assert worse >= 16


@pytest.mark.slow
class TestRateScaling:
    def test_exponent_near_two_thirds(self):
        table, exponent = rate_scaling_experiment(DESC, d=1, s=1.0, n_reps=10, root_seed=0)
        assert set(table["n"]) == {128, 256, 512, 1024}
        assert abs(exponent - 2 / 3) <= 0.25 * 2 / 3
