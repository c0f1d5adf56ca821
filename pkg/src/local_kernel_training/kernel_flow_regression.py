"""
kernel gradient flow regression with early stopping

The flow d/dt f_t(x) = -(1/n) K(x, X)(f_t(X) - y), f_0 = 0, has the closed form
f_t(x) = K(x, X) U diag((1 - exp(-λ_i t/n))/λ_i) Uᵀ y with K(X, X) = U diag(λ) Uᵀ.
The same 1/n time convention is used by the network training in `mirrored_network`.
"""
import logging
import math
from typing import Callable, Optional, Sequence

import attrs
import numpy as np
import pandas as pd
from attrs import define, field, frozen, validators
from scipy.stats import linregress

from local_ntk_spectra.ntk_kernels import Kernel, NtkDescriptor, gram, ntk_kernel
from local_ntk_spectra.spectral_estimator import SampleDistribution, sample
from local_ntk_utils.errors import NotPositiveDefinite
from local_ntk_utils.general_utils import substream

logger = logging.getLogger(__name__)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


@define(eq=False)
class RegressionTask:
    """training data of y = f*(x) + noise

    Attributes:
    `X`: np.ndarray, (n, d)
    `y`: np.ndarray, (n,)
    `f_star`: Optional[Callable], ground truth when known
    `noise_sigma`: float, >= 0
    `M`: Optional[float], truncation level for cross validation (|y| <= M)
    """
    X: np.ndarray = field(converter=_as_matrix)
    y: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=float).ravel())
    f_star: Optional[Callable] = field(default=None)
    noise_sigma: float = field(default=0.0, converter=float, validator=validators.ge(0))
    M: Optional[float] = field(default=None)

    def __attrs_post_init__(self):
        if len(self.X) != len(self.y) or len(self.y) < 1:
            raise ValueError(f"need len(X) = len(y) >= 1, got {len(self.X)} and {len(self.y)}")
        if self.M is not None and self.M <= 0:
            raise ValueError(f"truncation level M must be positive, got {self.M}")

    @property
    def n(self) -> int:
        return len(self.y)


# ==============================================================================
# // closed-form flow
# ==============================================================================

@frozen(eq=False)
class FlowPredictor:
    """f_t of the kernel gradient flow on (X, y); `at(t)` moves along the flow for free"""
    kernel: Kernel
    X: np.ndarray
    y: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    t: float = field(default=0.0, converter=float, validator=validators.ge(0))
    _uy: np.ndarray = field(default=None, repr=False)

    def __attrs_post_init__(self):
        if self._uy is None:
            object.__setattr__(self, "_uy", self.eigvecs.T @ self.y)

    @classmethod
    def fit(cls, kernel: Kernel | NtkDescriptor, X, y, t: float = 0.0) -> "FlowPredictor":
        if isinstance(kernel, NtkDescriptor):
            kernel = ntk_kernel(kernel)
        X = _as_matrix(X)
        y = np.asarray(y, dtype=float).ravel()
        vals, vecs = gram(kernel, X).eigh()
        if vals[-1] <= 0:
            raise NotPositiveDefinite(f"Gram not PD: λ_min = {vals[-1]:.3e}", lambda_min=float(vals[-1]))
        return cls(kernel=kernel, X=X, y=y, eigvals=vals, eigvecs=vecs, t=t)

    @classmethod
    def from_task(cls, kernel: Kernel | NtkDescriptor, task: RegressionTask, t: float = 0.0) -> "FlowPredictor":
        return cls.fit(kernel, task.X, task.y, t=t)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def lambda_min(self) -> float:
        return float(self.eigvals[-1])

    def at(self, t: float) -> "FlowPredictor":
        return attrs.evolve(self, t=t, uy=self._uy)

    def spectral_filter(self) -> np.ndarray:
        """(1 - exp(-λ t/n))/λ"""
        return -np.expm1(-self.eigvals * self.t / self.n) / self.eigvals

    def coefficients(self) -> np.ndarray:
        return self.eigvecs @ (self.spectral_filter() * self._uy)

    def predict(self, Xq) -> np.ndarray:
        return self.kernel(_as_matrix(Xq), self.X) @ self.coefficients()

    def __call__(self, Xq) -> np.ndarray:
        return self.predict(Xq)

    def train_predictions(self) -> np.ndarray:
        return self.eigvecs @ (-np.expm1(-self.eigvals * self.t / self.n) * self._uy)

    def train_residual(self) -> float:
        """‖f_t(X) - y‖ = ‖exp(-K t/n) y‖"""
        return float(np.linalg.norm(np.exp(-self.eigvals * self.t / self.n) * self._uy))

    def residual_envelope(self) -> float:
        """exp(-λ_min t/n) ‖y‖"""
        return float(np.exp(-self.lambda_min * self.t / self.n) * np.linalg.norm(self.y))

    def time_derivative(self, Xq) -> np.ndarray:
        """right-hand side -(1/n) K(x, X)(f_t(X) - y) of the flow"""
        return -self.kernel(_as_matrix(Xq), self.X) @ (self.train_predictions() - self.y) / self.n


def flow_predict(pred: FlowPredictor, x) -> float:
    return float(pred.predict(np.atleast_2d(x))[0])


# ==============================================================================
# // stopping times
# ==============================================================================

def _check_smoothness(d: int, s: float):
    if s <= 1 / (d + 1):
        raise ValueError(f"smoothness below threshold: need s > 1/(d+1) = {1 / (d + 1):.4f}, got s={s}")


def optimal_stopping_time(n: int, d: int, s: float, c: float = 1.0) -> float:
    """t_op = c · n^{(d+1)/(s(d+1)+d)}"""
    _check_smoothness(d, s)
    if n < 1 or c <= 0:
        raise ValueError(f"need n >= 1 and c > 0, got n={n}, c={c}")
    return c * n ** ((d + 1) / (s * (d + 1) + d))


def optimal_rate_exponent(d: int, s: float) -> float:
    """L2 risk at t_op decays like n^{-s(d+1)/(s(d+1)+d)}"""
    _check_smoothness(d, s)
    return s * (d + 1) / (s * (d + 1) + d)


def sup_rate_exponent(d: int, s: float) -> float:
    """sup-norm risk at t_op decays like n^{-(s-1)(d+1)/(s(d+1)+d)}, s > 1"""
    if s <= 1:
        raise ValueError(f"the sup-norm rate needs s > 1, got s={s}")
    return (s - 1) * (d + 1) / (s * (d + 1) + d)


def candidate_stopping_times(n: int, Q: float = 2.0) -> list[float]:
    """{1, Q, ..., Q^k} with k = ⌊ln_Q n⌋"""
    if Q <= 1:
        raise ValueError(f"candidate grid ratio must be > 1, got Q={Q}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    k = int(math.floor(math.log(n) / math.log(Q)))
    # floating point log can land on either side of an exact power
    while Q ** (k + 1) <= n:
        k += 1
    while k > 0 and Q**k > n:
        k -= 1
    return [float(Q**j) for j in range(k + 1)]


def truncate(a, M: float):
    """L_M(a) = sgn(a) min(|a|, M)"""
    if M <= 0:
        raise ValueError(f"truncation level must be positive, got {M}")
    out = np.clip(a, -M, M)
    return float(out) if np.ndim(out) == 0 else out


# ==============================================================================
# // cross validation
# ==============================================================================

@frozen(eq=False)
class TruncatedPredictor:
    base: FlowPredictor
    M: float

    def predict(self, Xq) -> np.ndarray:
        return truncate(self.base.predict(Xq), self.M)

    def __call__(self, Xq) -> np.ndarray:
        return self.predict(Xq)


@frozen(eq=False)
class CvSelection:
    t_cv: float
    risks: pd.DataFrame
    predictor: TruncatedPredictor


def cv_select_stopping(
    pred_family: FlowPredictor,
    candidates: Sequence[float],
    X_hold,
    y_hold,
    M: float,
) -> CvSelection:
    """argmin over the candidates of Σ (L_M(f_t(x̃_i)) - ỹ_i)², ties to the smallest t

    Parameters
    ----------
    pred_family : FlowPredictor
        the flow on the training half, any t
    candidates : Sequence[float]
        stopping times, e.g. `candidate_stopping_times(n, Q)`
    X_hold, y_hold :
        the held-out half
    M : float
        truncation level

    Returns
    -------
    CvSelection
        selected time, the risk of every candidate, and L_M ∘ f_{t_cv}
    """
    times = sorted(set(float(t) for t in candidates))
    X_hold = _as_matrix(X_hold)
    y_hold = np.asarray(y_hold, dtype=float).ravel()
    if len(times) == 0:
        raise ValueError("no candidate stopping times")
    if len(y_hold) == 0:
        raise ValueError("empty holdout set")
    K_hold = pred_family.kernel(X_hold, pred_family.X)
    risks = []
    for t in times:
        pred_t = K_hold @ pred_family.at(t).coefficients()
        risks.append(float(np.sum((truncate(pred_t, M) - y_hold) ** 2)))
    best = int(np.argmin(risks))
    t_cv = times[best]
    logger.debug("cv stopping time", extra={"t_cv": t_cv, "n_candidates": len(times)})
    return CvSelection(
        t_cv=t_cv,
        risks=pd.DataFrame({"t": times, "holdout_risk": risks}),
        predictor=TruncatedPredictor(base=pred_family.at(t_cv), M=M),
    )


def cv_guarantee_bound(best_risk: float, M: float, n_candidates: int, n_holdout: int, delta: float = 0.1) -> float:
    """2·best + (160 M² ln(2|T_n|/δ)/ñ)^{1/2}, the oracle inequality of the cross validated stopping time"""
    return 2 * best_risk + math.sqrt(160 * M**2 * math.log(2 * n_candidates / delta) / n_holdout)


# ==============================================================================
# // risks and synthetic targets
# ==============================================================================

def l2_risk(predictor: Callable, f_star: Callable, dist: SampleDistribution, n_mc: int = 10_000, seed: int = 0) -> float:
    """Monte Carlo E(f̂(x) - f*(x))² over fresh draws from dist"""
    X = sample(dist, n_mc, rng=np.random.default_rng(seed))
    return float(np.mean((np.asarray(predictor(X)) - np.asarray(f_star(X))) ** 2))


def sup_risk(predictor: Callable, f_star: Callable, grid) -> float:
    """max over the grid of (f̂(x) - f*(x))²"""
    grid = _as_matrix(grid)
    return float(np.max((np.asarray(predictor(grid)) - np.asarray(f_star(grid))) ** 2))


@frozen(eq=False)
class KernelExpansion:
    """f(x) = Σ_j coefs_j k(x, centers_j)"""
    kernel: Kernel
    centers: np.ndarray
    coefs: np.ndarray

    def __call__(self, X) -> np.ndarray:
        return self.kernel(_as_matrix(X), self.centers) @ self.coefs


def spectral_target(
    kernel: Kernel,
    centers,
    s: float = 1.0,
    n_components: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> KernelExpansion:
    """synthetic target Σ_i a_i λ_i^{s/2} e_i with (λ_i, e_i) the eigenpairs of the
    kernel on the empirical measure of `centers` and a_i ~ N(0, 1/k)

    For s = 1 this is an element of the RKHS; other values of s give an
    approximation of the interpolation space [H]^s.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    centers = _as_matrix(centers)
    m = len(centers)
    vals, vecs = gram(kernel, centers).eigh()
    vals = vals / m
    usable = int(np.sum(vals > 1e-10 * vals[0]))
    k = usable if n_components is None else min(n_components, usable)
    a = rng.standard_normal(k) / np.sqrt(k)
    coefs = vecs[:, :k] @ (a * vals[:k] ** (s / 2 - 1)) / np.sqrt(m)
    return KernelExpansion(kernel=kernel, centers=centers, coefs=coefs)


def make_regression_task(
    f_star: Callable,
    dist: SampleDistribution,
    n: int,
    noise_sigma: float,
    rng: np.random.Generator,
    M: Optional[float] = None,
) -> RegressionTask:
    X = sample(dist, n, rng=rng)
    y = np.asarray(f_star(X)) + noise_sigma * rng.standard_normal(n)
    return RegressionTask(X=X, y=y, f_star=f_star, noise_sigma=noise_sigma, M=M)


def risk_curve(
    predictor: FlowPredictor,
    times: Sequence[float],
    X_hold=None,
    y_hold=None,
    f_star: Optional[Callable] = None,
    dist: Optional[SampleDistribution] = None,
    n_mc: int = 2000,
    seed: int = 0,
) -> pd.DataFrame:
    """(t, train_residual, holdout_risk, l2_risk) along the flow; missing pieces are NaN"""
    rows = []
    for t in sorted(times):
        pred_t = predictor.at(t)
        holdout = np.nan
        if X_hold is not None:
            holdout = float(np.mean((pred_t.predict(X_hold) - np.asarray(y_hold)) ** 2))
        l2 = np.nan
        if f_star is not None and dist is not None:
            l2 = l2_risk(pred_t, f_star, dist, n_mc=n_mc, seed=seed)
        rows.append({"t": float(t), "train_residual": pred_t.train_residual(), "holdout_risk": holdout, "l2_risk": l2})
    return pd.DataFrame(rows)


# ==============================================================================
# // experiments
# ==============================================================================

def _cube(d: int) -> SampleDistribution:
    return SampleDistribution(kind="uniform_cube", d=d)


def rate_scaling_experiment(
    desc: NtkDescriptor,
    d: int = 1,
    s: float = 1.0,
    ns: Sequence[int] = (128, 256, 512, 1024),
    n_reps: int = 10,
    noise_sigma: float = 0.5,
    c: float = 1.0,
    n_centers: int = 40,
    n_mc: int = 4000,
    root_seed: int = 0,
) -> tuple[pd.DataFrame, float]:
    """L2 risk at t_op for growing n on a fixed synthetic target

    Returns
    -------
    tuple[pd.DataFrame, float]
        rows (n, rep, t_op, l2_risk) and the fitted exponent of mean risk vs n
    """
    dist = _cube(d)
    kernel = ntk_kernel(desc)
    target_rng = substream(root_seed, "target")
    f_star = spectral_target(kernel, sample(dist, n_centers, rng=target_rng), s=s, rng=target_rng)
    rows = []
    for n in ns:
        t_op = optimal_stopping_time(n, d, s, c)
        for rep in range(n_reps):
            task = make_regression_task(f_star, dist, n, noise_sigma, substream(root_seed, n, rep, "train"))
            pred = FlowPredictor.from_task(kernel, task, t=t_op)
            risk = l2_risk(pred, f_star, dist, n_mc=n_mc, seed=rep)
            rows.append({"n": n, "rep": rep, "t_op": t_op, "l2_risk": risk})
        logger.info("rate scaling sample size finished", extra={"n": n, "t_op": t_op})
    table = pd.DataFrame(rows)
    mean_risk = table.groupby("n")["l2_risk"].mean()
    fit = linregress(np.log(mean_risk.index.to_numpy(dtype=float)), np.log(mean_risk.to_numpy()))
    return table, float(-fit.slope)


def overfitting_probe(
    desc: NtkDescriptor,
    d: int = 1,
    n: int = 256,
    noise_sigma: float = 0.3,
    factor: float = 1e6,
    s: float = 1.0,
    c: float = 1.0,
    n_centers: int = 40,
    n_mc: int = 4000,
    seed: int = 0,
) -> tuple[float, float]:
    """L2 risk at t_op and at factor·t_op on one noisy synthetic task"""
    dist = _cube(d)
    kernel = ntk_kernel(desc)
    rng = substream(seed, "overfitting")
    f_star = spectral_target(kernel, sample(dist, n_centers, rng=rng), s=s, rng=rng)
    task = make_regression_task(f_star, dist, n, noise_sigma, rng)
    t_op = optimal_stopping_time(n, d, s, c)
    pred = FlowPredictor.from_task(kernel, task, t=t_op)
    risk_op = l2_risk(pred, f_star, dist, n_mc=n_mc, seed=seed)
    risk_over = l2_risk(pred.at(factor * t_op), f_star, dist, n_mc=n_mc, seed=seed)
    return risk_op, risk_over
