import numpy as np
import pandas as pd
import pytest

from local_kernel_training.kernel_flow_regression import FlowPredictor
from local_kernel_training.mirrored_network import (
    ProbeConfig,
    activations,
    flat_parameters,
    forward,
    init_network,
    kernel_gap,
    load_checkpoint,
    make_training_task,
    parameter_gradient,
    probe_grid,
    save_checkpoint,
    stable_step_size,
    tangent_kernel,
    tangent_kernel_matrix,
    train,
    uniform_gap,
    width_sweep,
    with_flat_parameters,
)
from local_ntk_spectra.ntk_kernels import NtkDescriptor, lift, ntk_matrix
from local_ntk_utils.errors import TrainingDiverged

DESC = NtkDescriptor(L=2)


@pytest.fixture
def small_net():
    return init_network(d=2, L=2, widths=64, seed=3)


@pytest.fixture
def five_point_task():
    return make_training_task(d=2, n=5, desc=DESC, seed=1)


class TestInit:
    def test_shapes(self, small_net):
        assert small_net.layer_sizes == (3, 64, 64, 1)
        assert [w.shape for w in small_net.weights] == [(2, 64, 3), (2, 64, 64), (2, 1, 64)]
        assert small_net.biases.shape == (2,)

    def test_mirror(self, small_net):
        for w in small_net.weights:
            np.testing.assert_array_equal(w[0], w[1])
        assert small_net.biases[0] == small_net.biases[1]

    def test_zero_output(self, small_net, rng):
        X = rng.uniform(-3, 3, size=(50, 2))
        out = forward(small_net, X)
        assert np.all(np.abs(out) < 1e-10 * (1 + np.linalg.norm(X, axis=1)))

    def test_same_seed_same_weights(self):
        a = init_network(2, 2, 32, seed=9)
        b = init_network(2, 2, 32, seed=9)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_spectral_norm_envelope(self):
        state = init_network(2, 2, 512, seed=0)
        for w in state.init_weights:
            assert np.linalg.norm(w, 2) <= 3 * np.sqrt(512)

    def test_uneven_widths(self):
        state = init_network(1, 3, (8, 16, 4), seed=0)
        assert state.layer_sizes == (2, 8, 16, 4, 1)
        assert state.m == 4

    @pytest.mark.parametrize("widths", [(8,), (8, 0)])
    def test_bad_widths(self, widths):
        with pytest.raises(ValueError):
            init_network(2, 2, widths)


class TestForward:
    def test_single_point_is_float(self, small_net):
        assert isinstance(forward(small_net, np.array([0.1, 0.2])), float)

    def test_wrong_dimension(self, small_net):
        with pytest.raises(ValueError):
            forward(small_net, np.zeros((3, 5)))

    def test_relu_layer_homogeneity(self, small_net, rng):
        X = rng.uniform(-1, 1, size=(4, 2))
        W = small_net.weights[0][0]
        x_tilde = lift(X).x_tilde
        for c in [0.5, 3.0]:
            np.testing.assert_allclose(np.maximum(c * x_tilde @ W.T, 0), c * np.maximum(x_tilde @ W.T, 0))

    def test_activation_patterns(self, small_net, rng):
        p1, p2 = activations(small_net, rng.uniform(-1, 1, size=(4, 2)))
        assert p1.pattern[0] is None
        for l in (1, 2):
            np.testing.assert_array_equal(p1.pattern[l], p1.alpha[l] > 0)
            np.testing.assert_array_equal(p1.pattern[l], p2.pattern[l])


class TestTangentKernel:
    def test_matches_flattened_gradients(self, small_net, rng):
        X = rng.uniform(-1, 1, size=(6, 2))
        grads = np.array([parameter_gradient(small_net, x) for x in X])
        np.testing.assert_allclose(tangent_kernel_matrix(small_net, X, X), grads @ grads.T, rtol=1e-8)

    def test_symmetric_and_nonnegative_diagonal(self, small_net, rng):
        x, x2 = rng.uniform(-1, 1, size=(2, 2))
        assert tangent_kernel(small_net, x, x2) == pytest.approx(tangent_kernel(small_net, x2, x), rel=1e-12)
        assert tangent_kernel(small_net, x, x) >= 0

    def test_gradient_against_finite_differences(self, small_net, five_point_task, rng):
        # move away from the mirrored point so both parities differ
        train(small_net, five_point_task, 0.05, 20)
        theta = flat_parameters(small_net)
        h = 1e-6
        for x in rng.uniform(-1, 1, size=(20, 2)):
            v = rng.standard_normal(theta.size)
            v /= np.linalg.norm(v)
            plus = forward(with_flat_parameters(small_net, theta + h * v), x)
            minus = forward(with_flat_parameters(small_net, theta - h * v), x)
            analytic = parameter_gradient(small_net, x) @ v
            assert abs((plus - minus) / (2 * h) - analytic) <= 1e-5 * abs(analytic) + 1e-9

    def test_flat_parameter_round_trip(self, small_net):
        theta = flat_parameters(small_net)
        assert theta.size == small_net.n_parameters
        np.testing.assert_array_equal(flat_parameters(with_flat_parameters(small_net, theta)), theta)
        with pytest.raises(ValueError):
            with_flat_parameters(small_net, theta[:-1])

    def test_close_to_ntk_at_large_width(self):
        grid = probe_grid(2, per_axis=3)
        wide = init_network(2, 2, 2048, seed=0)
        K_nt = ntk_matrix(DESC, grid, grid)
        assert kernel_gap(wide, DESC, grid) < 0.2 * np.max(np.abs(K_nt))


class TestProbeGrid:
    def test_full_grid(self):
        grid = probe_grid(2)
        assert grid.shape == (25, 2)
        assert grid.min() == -1.0 and grid.max() == 1.0

    def test_capped(self):
        grid = probe_grid(6)
        assert grid.shape == (625, 6)
        assert len(np.unique(grid, axis=0)) == 625


class TestTrain:
    def test_residual_decreases(self, five_point_task):
        state = init_network(2, 2, 512, seed=0)
        eta = stable_step_size(state, five_point_task.X)
        trace = train(state, five_point_task, eta, 200, ProbeConfig(log_every=1))
        assert np.all(np.diff(trace.train_residuals) <= 1e-8)
        assert trace.times[0] == 0.0
        assert np.all(np.diff(trace.times) > 0)

    def test_loss_descent_fraction(self, five_point_task):
        descents = []
        for seed in range(3):
            state = init_network(2, 2, 128, seed=seed)
            trace = train(state, five_point_task, stable_step_size(state, five_point_task.X), 100)
            descents.extend(np.diff(trace.step_losses) <= 1e-12)
        assert np.mean(descents) >= 0.95

    def test_output_envelope(self, five_point_task, rng):
        state = init_network(2, 2, 512, seed=1)
        train(state, five_point_task, stable_step_size(state, five_point_task.X), 100)
        X = rng.uniform(-2, 2, size=(30, 2))
        assert np.all(np.abs(forward(state, X)) <= 100 * lift(X).norm_tilde)

    def test_trace_frame(self, five_point_task):
        state = init_network(2, 2, 32, seed=0)
        trace = train(state, five_point_task, 0.01, 25, ProbeConfig(log_every=10, grid=probe_grid(2, 3), ntk=DESC))
        df = trace.to_frame()
        assert list(df.columns) == ["t", "residual", "drift_l0", "drift_l1", "drift_l2", "kernel_gap", "predictor_gap"]
        assert list(df["t"]) == pytest.approx([0.0, 0.1, 0.2, 0.25])
        assert df["predictor_gap"].isna().all()
        assert (df[["drift_l0", "drift_l1", "drift_l2", "kernel_gap"]] >= 0).all().all()
        assert df.loc[0, "drift_l0"] == 0.0

    def test_divergence(self, five_point_task):
        state = init_network(2, 2, 32, seed=0)
        with pytest.raises(TrainingDiverged) as info:
            train(state, five_point_task, 1e4, 300)
        assert "step" in info.value.diagnostics

    def test_bad_step_size(self, small_net, five_point_task):
        with pytest.raises(ValueError):
            train(small_net, five_point_task, 0.0, 10)


class TestUniformGap:
    def test_zero_at_start_and_bounded(self, five_point_task):
        grid = probe_grid(2)
        flow = FlowPredictor.from_task(DESC, five_point_task)
        state = init_network(2, 2, 256, seed=0)
        trace = train(state, five_point_task, 0.05, 60, ProbeConfig(log_every=20, grid=grid, flow=flow))
        assert uniform_gap(trace, flow, grid, times=[0.0]) <= 1e-12
        gap = uniform_gap(trace, flow, grid)
        assert np.isfinite(gap)
        assert gap <= 10 * np.linalg.norm(five_point_task.y)
        assert gap == pytest.approx(max(trace.predictor_gaps))

    def test_time_misalignment(self, five_point_task):
        grid = probe_grid(2)
        flow = FlowPredictor.from_task(DESC, five_point_task)
        trace = train(init_network(2, 2, 32, seed=0), five_point_task, 0.05, 20, ProbeConfig(log_every=10, grid=grid))
        with pytest.raises(ValueError, match="time misalignment"):
            uniform_gap(trace, flow, grid, times=[0.33])
        with pytest.raises(ValueError, match="time misalignment"):
            uniform_gap(trace, flow, probe_grid(2, per_axis=3))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, five_point_task):
        state = init_network(2, 2, (16, 8), seed=4)
        train(state, five_point_task, 0.05, 5)
        path = save_checkpoint(state, tmp_path / "net.npz")
        loaded = load_checkpoint(path)
        assert (loaded.d, loaded.L, loaded.widths, loaded.seed) == (2, 2, (16, 8), 4)
        np.testing.assert_array_equal(flat_parameters(loaded), flat_parameters(state))
        assert loaded.weight_drifts() == state.weight_drifts()


class TestWidthSweep:
    def test_small_sweep(self):
        table = width_sweep(d=2, L=2, widths=(16, 32), n_seeds=2, n=4, n_steps=20, log_every=10)
        assert len(table) == 4
        assert set(table["width"]) == {16, 32}
        assert np.all(np.isfinite(table[["init_kernel_gap", "max_predictor_gap", "max_scaled_drift"]].to_numpy()))

    def test_worker_pool_matches_sequential(self):
        kwargs = dict(d=2, L=2, widths=(16, 32), n_seeds=2, n=4, n_steps=20, log_every=10, root_seed=3)
        sequential = width_sweep(**kwargs, n_workers=1)
        pooled = width_sweep(**kwargs, n_workers=2)
        pd.testing.assert_frame_equal(sequential, pooled)
        assert list(pooled["seed"]) == [0, 0, 1, 1]
        assert list(pooled["width"]) == [16, 32, 16, 32]


@pytest.mark.slow
class TestLazyRegime:
    @pytest.fixture(scope="class")
    def sweep(self):
        return width_sweep(d=2, L=2, widths=(256, 1024, 4096), n_seeds=5, n=5)

    @staticmethod
    def _majority_decreasing(sweep, column):
        wins = 0
        for _, group in sweep.groupby("seed"):
            values = group.sort_values("width")[column].to_numpy()
            wins += bool(np.all(np.diff(values) < 0))
        return wins >= 3

    def test_init_kernel_gap_decreases(self, sweep):
        assert self._majority_decreasing(sweep, "init_kernel_gap")

    def test_predictor_gap_decreases(self, sweep):
        assert self._majority_decreasing(sweep, "max_predictor_gap")

    def test_scaled_drift_bounded(self, sweep):
        wins = 0
        for _, group in sweep.groupby("seed"):
            values = group.sort_values("width")["max_scaled_drift"].to_numpy()
            wins += values[-1] <= values[0]
        assert wins >= 3
        assert sweep["max_scaled_drift"].max() < 10

    def test_residual_follows_kernel_envelope(self):
        task = make_training_task(d=2, n=5, desc=DESC, seed=0)
        state = init_network(2, 2, 4096, seed=0)
        K0 = tangent_kernel_matrix(state, task.X, task.X)
        lam_min = np.linalg.eigvalsh(K0)[0]
        eta = stable_step_size(state, task.X)
        trace = train(state, task, eta, 300, ProbeConfig(log_every=30))
        envelope = np.exp(-lam_min * np.array(trace.times) / task.n) * np.linalg.norm(task.y)
        assert np.all(np.array(trace.train_residuals) <= 2 * envelope + 1e-12)
