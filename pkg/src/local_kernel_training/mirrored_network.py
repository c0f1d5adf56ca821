"""
mirrored fully-connected ReLU network

Two parities p = 1, 2 share the architecture
    α^(0) = x̃ = (x, 1)
    α^(l) = √(2/m_l) σ(W^(l-1,p) α^(l-1)),  l = 1..L
    g^(p)(x) = W^(L,p) α^(L) + b^(p)
and the network is f = (g^(1) - g^(2))/√2. Both parities start from the same
weights, so f ≡ 0 at initialization. Weights of layer l are stored as one array
of shape (2, m_{l+1}, m_l), parity first.
"""
import logging
import multiprocessing
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from attrs import define, field, frozen, validators

from local_kernel_training.kernel_flow_regression import FlowPredictor, RegressionTask, spectral_target
from local_ntk_spectra.ntk_kernels import NtkDescriptor, gram, lift, ntk_kernel, ntk_matrix
from local_ntk_spectra.spectral_estimator import SampleDistribution, sample
from local_ntk_utils.errors import NumericalFailure, TrainingDiverged
from local_ntk_utils.general_utils import derived_seed, substream

logger = logging.getLogger(__name__)

PARITY_SIGNS = (1 / np.sqrt(2), -1 / np.sqrt(2))
MIRROR_ATOL = 1e-10
DIVERGENCE_WINDOW = 100
DIVERGENCE_FACTOR = 10.0


@define(eq=False)
class NetworkState:
    """parameters of a mirrored network

    Attributes:
    `d`: int
        input dimension
    `L`: int
        number of hidden layers
    `widths`: tuple[int, ...]
        hidden widths m_1..m_L
    `seed`: int
        seed the weights were drawn from
    `weights`: list[np.ndarray]
        W^(l) for l = 0..L, shape (2, m_{l+1}, m_l) with m_0 = d + 1, m_{L+1} = 1
    `biases`: np.ndarray
        output biases b^(p), shape (2,)
    `init_weights`: list[np.ndarray]
        parity-1 weights at t = 0 (parity 2 is identical at t = 0)
    `init_bias`: float
    """
    d: int
    L: int
    widths: tuple[int, ...]
    seed: int
    weights: list[np.ndarray]
    biases: np.ndarray
    init_weights: list[np.ndarray]
    init_bias: float

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.d + 1, *self.widths, 1)

    @property
    def m(self) -> int:
        return min(self.widths)

    @property
    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + self.biases.size

    def copy(self) -> "NetworkState":
        return NetworkState(
            d=self.d,
            L=self.L,
            widths=self.widths,
            seed=self.seed,
            weights=[w.copy() for w in self.weights],
            biases=self.biases.copy(),
            init_weights=[w.copy() for w in self.init_weights],
            init_bias=self.init_bias,
        )

    def weight_drifts(self) -> list[float]:
        """‖W^(l,p)_t - W^(l,p)_0‖_F for each layer, maximum over the parities"""
        return [
            float(max(np.linalg.norm(w[p] - w0) for p in (0, 1)))
            for w, w0 in zip(self.weights, self.init_weights)
        ]


def _resolve_widths(L: int, widths: int | Sequence[int]) -> tuple[int, ...]:
    if np.isscalar(widths):
        widths = (int(widths),) * L
    widths = tuple(int(m) for m in widths)
    if len(widths) != L:
        raise ValueError(f"need one width per hidden layer: L={L}, widths={widths}")
    if min(widths) < 1:
        raise ValueError(f"widths must be >= 1, got {widths}")
    return widths


def init_network(d: int, L: int, widths: int | Sequence[int], seed: int = 0) -> NetworkState:
    """mirror initialization: parity-1 entries i.i.d. N(0, 1), parity 2 a copy"""
    if d < 1 or L < 1:
        raise ValueError(f"need d >= 1 and L >= 1, got d={d}, L={L}")
    widths = _resolve_widths(L, widths)
    rng = substream(seed, "init")
    sizes = (d + 1, *widths, 1)
    init_weights = [rng.standard_normal((sizes[l + 1], sizes[l])) for l in range(L + 1)]
    init_bias = float(rng.standard_normal())
    state = NetworkState(
        d=d,
        L=L,
        widths=widths,
        seed=seed,
        weights=[np.stack([w, w]) for w in init_weights],
        biases=np.array([init_bias, init_bias]),
        init_weights=init_weights,
        init_bias=init_bias,
    )
    probes = rng.uniform(-1, 1, size=(5, d))
    out = np.abs(forward(state, probes))
    if np.max(out) >= MIRROR_ATOL:
        raise NumericalFailure(f"mirror cancellation failed: max |f| = {np.max(out):.3e} at initialization")
    return state


# ==============================================================================
# // forward and backward passes
# ==============================================================================

@frozen(eq=False)
class ParityPass:
    """per-layer quantities of one parity on a batch (rows = points)

    `alpha[l]`: α^(l), l = 0..L (alpha[0] = x̃)
    `pattern[l]`: activation pattern D^(l) = 1{W^(l-1) α^(l-1) > 0}, l = 1..L (pattern[0] is None)
    `g`: g^(p) on the batch
    """
    alpha: list[np.ndarray]
    pattern: list[Optional[np.ndarray]]
    g: np.ndarray


def _parity_forward(state: NetworkState, x_tilde: np.ndarray, p: int) -> ParityPass:
    alpha = [x_tilde]
    pattern = [None]
    for l in range(1, state.L + 1):
        pre = alpha[-1] @ state.weights[l - 1][p].T
        # σ'(0) = 0
        pattern.append(pre > 0)
        alpha.append(np.sqrt(2 / state.widths[l - 1]) * np.maximum(pre, 0.0))
    g = alpha[-1] @ state.weights[state.L][p][0] + state.biases[p]
    return ParityPass(alpha=alpha, pattern=pattern, g=g)


def _parity_backward(state: NetworkState, fp: ParityPass, p: int) -> list[Optional[np.ndarray]]:
    """γ^(l) = ∂g/∂(W^(l-1) α^(l-1)) for l = 1..L; ∇_{W^(l-1)} g = γ^(l) α^(l-1)ᵀ"""
    L = state.L
    gamma: list[Optional[np.ndarray]] = [None] * (L + 1)
    gamma[L] = np.sqrt(2 / state.widths[L - 1]) * fp.pattern[L] * state.weights[L][p][0]
    for l in range(L, 1, -1):
        gamma[l - 1] = np.sqrt(2 / state.widths[l - 2]) * fp.pattern[l - 1] * (gamma[l] @ state.weights[l - 1][p])
    return gamma


def activations(state: NetworkState, X) -> tuple[ParityPass, ParityPass]:
    """forward passes of both parities, with every α^(l) and D^(l)"""
    x_tilde = lift(_points(state, X)).x_tilde
    return _parity_forward(state, x_tilde, 0), _parity_forward(state, x_tilde, 1)


def _points(state: NetworkState, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != state.d:
        raise ValueError(f"expected points of dimension {state.d}, got shape {X.shape}")
    return X


def forward(state: NetworkState, X):
    """f(x; θ). A single point of shape (d,) gives a float, a batch (n, d) an array"""
    single = np.ndim(X) == 1
    p1, p2 = activations(state, X)
    f = (p1.g - p2.g) / np.sqrt(2)
    return float(f[0]) if single else f


# ==============================================================================
# // tangent kernel and gradients
# ==============================================================================

def _parity_tangent(state: NetworkState, fx: ParityPass, gx, fz: ParityPass, gz) -> np.ndarray:
    """Σ_l (γ_xᵀγ_z)(α_xᵀα_z) over all layers of one parity, output bias included"""
    K = fx.alpha[state.L] @ fz.alpha[state.L].T + 1.0
    for l in range(1, state.L + 1):
        K += (gx[l] @ gz[l].T) * (fx.alpha[l - 1] @ fz.alpha[l - 1].T)
    return K


def tangent_kernel_matrix(state: NetworkState, X, Z) -> np.ndarray:
    """K_t(X, Z) = (K^(1)_t + K^(2)_t)/2"""
    px, pz = activations(state, X), activations(state, Z)
    K = np.zeros((len(px[0].g), len(pz[0].g)))
    for p in (0, 1):
        gx = _parity_backward(state, px[p], p)
        gz = _parity_backward(state, pz[p], p)
        K += _parity_tangent(state, px[p], gx, pz[p], gz)
    return K / 2


def tangent_kernel(state: NetworkState, x, x2) -> float:
    """K_t(x, x') = <∇_θ f(x; θ_t), ∇_θ f(x'; θ_t)>"""
    return float(tangent_kernel_matrix(state, np.atleast_2d(x), np.atleast_2d(x2))[0, 0])


def _loss_gradient(state: NetworkState, passes, w: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Σ_i w_i ∇_θ f(x_i), blocks shaped like the parameters"""
    grads = [np.empty_like(W) for W in state.weights]
    bias_grad = np.empty(2)
    for p, sign in zip((0, 1), PARITY_SIGNS):
        fp = passes[p]
        gamma = _parity_backward(state, fp, p)
        ws = sign * w
        for l in range(1, state.L + 1):
            grads[l - 1][p] = gamma[l].T @ (ws[:, None] * fp.alpha[l - 1])
        grads[state.L][p] = (ws @ fp.alpha[state.L])[None, :]
        bias_grad[p] = np.sum(ws)
    return grads, bias_grad


def flat_parameters(state: NetworkState) -> np.ndarray:
    return np.concatenate([w.ravel() for w in state.weights] + [state.biases])


def with_flat_parameters(state: NetworkState, theta: np.ndarray) -> NetworkState:
    """copy of `state` carrying the parameter vector `theta` (ordering of `flat_parameters`)"""
    theta = np.asarray(theta, dtype=float)
    if theta.size != state.n_parameters:
        raise ValueError(f"expected {state.n_parameters} parameters, got {theta.size}")
    new = state.copy()
    start = 0
    for l, w in enumerate(new.weights):
        new.weights[l] = theta[start:start + w.size].reshape(w.shape).copy()
        start += w.size
    new.biases = theta[start:].copy()
    return new


def parameter_gradient(state: NetworkState, x) -> np.ndarray:
    """∇_θ f(x) flattened in the order of `flat_parameters`"""
    passes = activations(state, np.atleast_2d(x))
    grads, bias_grad = _loss_gradient(state, passes, np.ones(1))
    return np.concatenate([g.ravel() for g in grads] + [bias_grad])


# ==============================================================================
# // probes
# ==============================================================================

def probe_grid(d: int, per_axis: int = 5, radius: float = 1.0, cap: int = 625) -> np.ndarray:
    """tensor grid of per_axis^d points on [-radius, radius]^d; for large d, `cap`
    points evenly spread through the grid's index order

    The sup over the grid is a lower bound on the sup over the ball.
    """
    axis = np.linspace(-radius, radius, per_axis)
    total = per_axis**d
    flat = np.arange(total) if total <= cap else np.unique(np.linspace(0, total - 1, cap).round().astype(np.int64))
    idx = np.unravel_index(flat, (per_axis,) * d)
    return np.stack([axis[i] for i in idx], axis=1)


def kernel_gap(state: NetworkState, desc: NtkDescriptor, grid) -> float:
    """sup over grid pairs of |K_t - K^NT|"""
    return float(np.max(np.abs(tangent_kernel_matrix(state, grid, grid) - ntk_matrix(desc, grid, grid))))


def stable_step_size(state: NetworkState, X) -> float:
    """n/(2 λ_max(K_t(X, X))); a heuristic, the flow itself has no step size"""
    lam_max = float(np.linalg.eigvalsh(tangent_kernel_matrix(state, X, X))[-1])
    return len(np.atleast_2d(X)) / (2 * lam_max)


@frozen
class ProbeConfig:
    """what `train` records

    Attributes:
    `log_every`: int
        log the trace every `log_every` steps (and at the first and last step). Default: 10
    `grid`: Optional[np.ndarray]
        probe points for sup norms; predictions on the grid are kept in the trace
    `ntk`: Optional[NtkDescriptor]
        when set (with a grid) record sup |K_t - K^NT| over the grid
    `flow`: Optional[FlowPredictor]
        when set (with a grid) record sup |f^NN_t - f^NTK_t| over the grid
    """
    log_every: int = field(default=10, validator=validators.ge(1))
    grid: Optional[np.ndarray] = field(default=None, eq=False)
    ntk: Optional[NtkDescriptor] = field(default=None)
    flow: Optional[FlowPredictor] = field(default=None, eq=False)


@define(eq=False)
class TrainTrace:
    times: list[float] = field(factory=list)
    steps: list[int] = field(factory=list)
    train_residuals: list[float] = field(factory=list)
    weight_drifts: list[list[float]] = field(factory=list)
    kernel_gaps: list[float] = field(factory=list)
    predictor_gaps: list[float] = field(factory=list)
    grid_predictions: list[np.ndarray] = field(factory=list, repr=False)
    step_losses: list[float] = field(factory=list, repr=False)
    grid: Optional[np.ndarray] = field(default=None, repr=False)

    def to_frame(self) -> pd.DataFrame:
        """(t, residual, drift_l0..drift_lL, kernel_gap, predictor_gap)"""
        df = pd.DataFrame({"t": self.times, "residual": self.train_residuals})
        drifts = np.array(self.weight_drifts)
        for l in range(drifts.shape[1]):
            df[f"drift_l{l}"] = drifts[:, l]
        df["kernel_gap"] = self.kernel_gaps if self.kernel_gaps else np.nan
        df["predictor_gap"] = self.predictor_gaps if self.predictor_gaps else np.nan
        return df


def _record(trace: TrainTrace, state: NetworkState, step: int, t: float, residual: float, probe: ProbeConfig):
    trace.steps.append(step)
    trace.times.append(t)
    trace.train_residuals.append(residual)
    trace.weight_drifts.append(state.weight_drifts())
    if probe.grid is not None:
        predictions = forward(state, probe.grid)
        trace.grid_predictions.append(predictions)
        if probe.ntk is not None:
            trace.kernel_gaps.append(kernel_gap(state, probe.ntk, probe.grid))
        if probe.flow is not None:
            trace.predictor_gaps.append(float(np.max(np.abs(predictions - probe.flow.at(t).predict(probe.grid)))))
    logger.debug("training probe", extra={"step": step, "t": t, "residual": residual})


def train(
    state: NetworkState,
    task: RegressionTask,
    step_size: float,
    n_steps: int,
    probe: Optional[ProbeConfig] = None,
) -> TrainTrace:
    """full-batch gradient descent on (1/2n) Σ (f(x_i) - y_i)², updating `state` in place

    Step k sits at time t = k·step_size, the time of the flow
    θ' = -(1/n) ∇f(X; θ)(f(X; θ) - y) that the kernel flow linearizes.

    Raises
    ------
    TrainingDiverged
        the residual turned non-finite or grew 10x within 100 steps
    """
    if step_size <= 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    if probe is None:
        probe = ProbeConfig()
    if probe.grid is not None:
        probe = ProbeConfig(
            log_every=probe.log_every, grid=_points(state, probe.grid), ntk=probe.ntk, flow=probe.flow
        )
    n = task.n
    trace = TrainTrace(grid=probe.grid)
    residual_history = []
    for step in range(n_steps + 1):
        passes = activations(state, task.X)
        f = (passes[0].g - passes[1].g) / np.sqrt(2)
        r = f - task.y
        residual = float(np.linalg.norm(r))
        residual_history.append(residual)
        trace.step_losses.append(float(np.sum(r**2) / (2 * n)))
        t = step * step_size
        _check_divergence(residual_history, step, t, step_size)
        if step % probe.log_every == 0 or step == n_steps:
            _record(trace, state, step, t, residual, probe)
        if step == n_steps:
            break
        grads, bias_grad = _loss_gradient(state, passes, r / n)
        for W, G in zip(state.weights, grads):
            W -= step_size * G
        state.biases -= step_size * bias_grad
    logger.info(
        "training finished",
        extra={"m": state.m, "steps": n_steps, "t": n_steps * step_size, "residual": trace.train_residuals[-1]},
    )
    return trace


def _check_divergence(history: list[float], step: int, t: float, step_size: float):
    current = history[-1]
    diverged = not np.isfinite(current)
    previous = None
    if not diverged and step >= DIVERGENCE_WINDOW:
        previous = history[step - DIVERGENCE_WINDOW]
        diverged = current > DIVERGENCE_FACTOR * previous
    if diverged:
        diagnostics = {
            "step": step,
            "t": t,
            "step_size": step_size,
            "residual": current if np.isfinite(current) else str(current),
            "residual_window_start": previous,
            "initial_residual": history[0],
        }
        logger.error("training diverged", extra=diagnostics)
        raise TrainingDiverged(f"training diverged at step {step} (residual {current:.3e})", diagnostics=diagnostics)


def uniform_gap(trace: TrainTrace, ntk_flow: FlowPredictor, probe_grid, times: Optional[Sequence[float]] = None) -> float:
    """max over probe grid × logged times of |f^NN_t - f^NTK_t|

    `times` defaults to every logged time; each requested time must have been logged.
    """
    probe_grid = np.asarray(probe_grid, dtype=float)
    if trace.grid is None or trace.grid.shape != probe_grid.shape or not np.allclose(trace.grid, probe_grid):
        raise ValueError("time misalignment: the trace holds no predictions on this probe grid")
    logged = np.asarray(trace.times)
    if times is None:
        times = trace.times
    gap = 0.0
    for t in times:
        hits = np.flatnonzero(np.isclose(logged, t, rtol=1e-12, atol=1e-12))
        if len(hits) == 0:
            raise ValueError(f"time misalignment: t={t} was not logged")
        nn = trace.grid_predictions[hits[0]]
        gap = max(gap, float(np.max(np.abs(nn - ntk_flow.at(t).predict(probe_grid)))))
    return gap


# ==============================================================================
# // checkpoints
# ==============================================================================

def save_checkpoint(state: NetworkState, output_file: str | Path) -> Path:
    """npz with `header` = (d, L, m_1..m_L, seed) followed by the weight blocks"""
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([state.d, state.L, *state.widths, state.seed], dtype=np.int64)
    blocks = {f"W{l}": w for l, w in enumerate(state.weights)}
    blocks.update({f"W{l}_init": w for l, w in enumerate(state.init_weights)})
    with open(output_file, "wb") as f:
        np.savez(f, header=header, biases=state.biases, init_bias=np.array(state.init_bias), **blocks)
    return output_file


def load_checkpoint(input_file: str | Path) -> NetworkState:
    with np.load(input_file) as data:
        header = data["header"]
        d, L = int(header[0]), int(header[1])
        widths = tuple(int(m) for m in header[2:2 + L])
        return NetworkState(
            d=d,
            L=L,
            widths=widths,
            seed=int(header[2 + L]),
            weights=[data[f"W{l}"].copy() for l in range(L + 1)],
            biases=data["biases"].copy(),
            init_weights=[data[f"W{l}_init"].copy() for l in range(L + 1)],
            init_bias=float(data["init_bias"]),
        )


# ==============================================================================
# // width sweep
# ==============================================================================

def make_training_task(d: int, n: int, desc: NtkDescriptor, noise_sigma: float = 0.0, seed: int = 0) -> RegressionTask:
    """n points uniform on [-1, 1]^d with an RKHS target of the NTK"""
    rng = substream(seed, "network_task")
    dist = SampleDistribution(kind="uniform_cube", d=d)
    f_star = spectral_target(ntk_kernel(desc), sample(dist, 20, rng=rng), rng=rng)
    X = sample(dist, n, rng=rng)
    y = f_star(X) + noise_sigma * rng.standard_normal(n)
    return RegressionTask(X=X, y=y, f_star=f_star, noise_sigma=noise_sigma)


def ntk_step_size(desc: NtkDescriptor, X, fraction: float = 0.1) -> float:
    """fraction · n/λ_max(K^NT(X, X)); the same step for every width of a sweep"""
    lam_max = float(gram(desc, X).eigvals()[0])
    return fraction * len(X) / lam_max


def _sweep_setup(d: int, L: int, n: int, noise_sigma: float, step_fraction: float, root_seed: int):
    """task, flow, grid and step size shared by every run of a width sweep"""
    desc = NtkDescriptor(L=L)
    task = make_training_task(d, n, desc, noise_sigma=noise_sigma, seed=root_seed)
    flow = FlowPredictor.from_task(desc, task)
    return desc, task, flow, probe_grid(d), ntk_step_size(desc, task.X, step_fraction)


def width_sweep_run(
    m: int,
    rep: int,
    d: int,
    L: int,
    n: int,
    n_steps: int,
    step_fraction: float,
    noise_sigma: float,
    log_every: int,
    root_seed: int,
) -> dict:
    """one (width, seed) cell of `width_sweep`

    The shared task is rebuilt from `root_seed` so that the arguments stay picklable.
    """
    desc, task, flow, grid, step_size = _sweep_setup(d, L, n, noise_sigma, step_fraction, root_seed)
    state = init_network(d, L, m, seed=derived_seed(root_seed, rep, "network"))
    init_gap = kernel_gap(state, desc, grid)
    trace = train(state, task, step_size, n_steps, ProbeConfig(log_every=log_every, grid=grid, flow=flow))
    drift = np.max(np.array(trace.weight_drifts)) / m**0.25
    row = {
        "width": m,
        "seed": rep,
        "init_kernel_gap": init_gap,
        "max_predictor_gap": uniform_gap(trace, flow, grid),
        "max_scaled_drift": float(drift),
        "final_residual": trace.train_residuals[-1],
        "step_size": step_size,
        "t_max": n_steps * step_size,
    }
    logger.info("width sweep run finished", extra=row)
    return row


def width_sweep(
    d: int = 2,
    L: int = 2,
    widths: Sequence[int] = (256, 1024, 4096),
    n_seeds: int = 5,
    n: int = 5,
    n_steps: int = 500,
    step_fraction: float = 0.1,
    noise_sigma: float = 0.0,
    log_every: int = 25,
    root_seed: int = 0,
    n_workers: int = 1,
) -> pd.DataFrame:
    """train one network per (width, seed) on a shared task and compare it with the NTK flow

    Returns
    -------
    pd.DataFrame
        columns width, seed, init_kernel_gap, max_predictor_gap, max_scaled_drift,
        final_residual, step_size, t_max; rows ordered by seed, then width
    """
    args = [
        (m, rep, d, L, n, n_steps, step_fraction, noise_sigma, log_every, root_seed)
        for rep in range(n_seeds)
        for m in widths
    ]
    if n_workers > 1 and len(args) > 1:
        p = multiprocessing.Pool(min(n_workers, len(args)))
        rows = p.starmap(width_sweep_run, args)
        p.close()
        p.join()
    else:
        rows = [width_sweep_run(*a) for a in args]
    return pd.DataFrame(rows)
