"""
empirical eigenvalue decay of kernels: sampling, Gram eigenvalues, log–log fits
and the dimension × depth × distribution grid of decay-rate experiments
"""
import itertools
import logging
import multiprocessing
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from attrs import field, frozen, validators
from scipy.stats import linregress

from local_ntk_spectra.ntk_kernels import Kernel, NtkDescriptor, gram
from local_ntk_spectra.sphere_harmonics import ModeSpectrum
from local_ntk_utils.errors import UnreliableSpectrum
from local_ntk_utils.general_utils import substream

logger = logging.getLogger(__name__)

DIST_KINDS = ["uniform_cube", "uniform_sphere", "triangular", "clipped_normal", "sphere_cap"]

# names accepted on the command line
DISTRIBUTIONS = {
    "ucube": {"kind": "uniform_cube", "low": -1.0, "high": 1.0},
    "ucube01": {"kind": "uniform_cube", "low": 0.0, "high": 1.0},
    "triangular": {"kind": "triangular"},
    "clipped_normal": {"kind": "clipped_normal", "limit": 10.0},
}
DEFAULT_WINDOW = (50, 200)
NOISE_FLOOR_RTOL = 1e-10


# ==============================================================================
# // sampling
# ==============================================================================

def _check_cap_angle(instance, attribute, value):
    if not 0 < value <= np.pi:
        raise ValueError(f"degenerate cap angle {value}: need 0 < angle <= π")


@frozen
class SampleDistribution:
    """sampling measure of an experiment

    Attributes:
    `kind`: Literal["uniform_cube", "uniform_sphere", "triangular", "clipped_normal", "sphere_cap"]
        uniform_cube: coordinates i.i.d. U(low, high)
        uniform_sphere: uniform on S^d (points in R^{d+1})
        triangular: coordinates i.i.d. with density 1 - |x| on [-1, 1]
        clipped_normal: coordinates i.i.d. standard normal conditioned on (-limit, limit)
        sphere_cap: uniform on the cap of S^d within `cap_angle` of the last basis vector
    `d`: int
        input dimension (sphere dimension for the sphere kinds)
    `seed`: int. Default: 0
    `low`, `high`: float. Default: -1.0, 1.0
    `limit`: float. Default: 10.0
    `cap_angle`: float, radians. Default: π
    """
    kind: str = field(validator=validators.in_(DIST_KINDS))
    d: int = field(converter=int, validator=validators.ge(1))
    seed: int = field(default=0, converter=int)
    low: float = field(default=-1.0, converter=float)
    high: float = field(default=1.0, converter=float)
    limit: float = field(default=10.0, converter=float, validator=validators.gt(0))
    cap_angle: float = field(default=np.pi, converter=float, validator=_check_cap_angle)

    @property
    def ambient_dim(self) -> int:
        if self.kind in ("uniform_sphere", "sphere_cap"):
            return self.d + 1
        return self.d


def make_distribution(name: str, d: int, seed: int = 0) -> SampleDistribution:
    if name not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {name}. Expected one of: {list(DISTRIBUTIONS)}")
    return SampleDistribution(d=d, seed=seed, **DISTRIBUTIONS[name])


def _sphere_points(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sample(dist: SampleDistribution, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """n i.i.d. draws as rows; deterministic given `dist.seed` (or the supplied generator)"""
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    if rng is None:
        rng = np.random.default_rng(dist.seed)
    d = dist.d
    if dist.kind == "uniform_cube":
        return rng.uniform(dist.low, dist.high, size=(n, d))
    if dist.kind == "triangular":
        return rng.triangular(-1.0, 0.0, 1.0, size=(n, d))
    if dist.kind == "clipped_normal":
        X = rng.standard_normal((n, d))
        outside = np.abs(X) >= dist.limit
        while np.any(outside):
            X[outside] = rng.standard_normal(int(outside.sum()))
            outside = np.abs(X) >= dist.limit
        return X
    if dist.kind == "uniform_sphere":
        return _sphere_points(rng, n, d + 1)
    # sphere_cap: rejection from the whole sphere
    threshold = np.cos(dist.cap_angle)
    kept = []
    n_kept = 0
    while n_kept < n:
        Y = _sphere_points(rng, max(4 * n, 1000), d + 1)
        Y = Y[Y[:, -1] >= threshold]
        kept.append(Y)
        n_kept += len(Y)
    return np.vstack(kept)[:n]


# ==============================================================================
# // eigenvalues and fits
# ==============================================================================

@frozen
class DecayFit:
    """least squares fit ln λ_i = slope·ln i + intercept over a window of indices

    `rate` is the positive decay rate r = -slope.
    """
    rate: float
    slope: float
    intercept: float
    window: tuple
    r2: float
    n_samples: Optional[int] = None
    seed: Optional[int] = None


def theoretical_rate(d: int) -> float:
    """decay rate (d+1)/d of the NTK eigenvalues in dimension d"""
    return (d + 1) / d


def empirical_eigenvalues(
    desc_or_kernel: NtkDescriptor | Kernel, X: np.ndarray, noise_rtol: float = NOISE_FLOOR_RTOL
) -> np.ndarray:
    """eigenvalues of Gram(X)/n, descending, with the values below noise_rtol·trace dropped"""
    X = np.atleast_2d(X)
    n = X.shape[0]
    if n < 1:
        raise ValueError("need at least one sample point")
    K = gram(desc_or_kernel, X).entries / n
    vals = scipy.linalg.eigvalsh(K)[::-1]
    floor = noise_rtol * float(np.trace(K))
    n_negative = int(np.sum(vals < -floor))
    if n_negative > 0:
        logger.warning("negative eigenvalues beyond the noise floor", extra={"count": n_negative, "n": n})
    kept = vals[vals > floor]
    if len(kept) < n:
        logger.debug("dropped noise-floor eigenvalues", extra={"dropped": n - len(kept), "n": n})
    return kept


def _loglog_fit(index: np.ndarray, values: np.ndarray, window: Sequence[int]) -> tuple[float, float, float]:
    if np.any(values <= 0):
        bad = int(index[np.argmax(values <= 0)])
        raise UnreliableSpectrum(
            f"window exceeds reliable spectrum: nonpositive value at index {bad} in window {tuple(window)}"
        )
    fit = linregress(np.log(index), np.log(values))
    r2 = float(min(max(fit.rvalue**2, 0.0), 1.0))
    return float(fit.slope), float(fit.intercept), r2


def fit_decay(
    lambdas: Sequence[float],
    window: Sequence[int] = DEFAULT_WINDOW,
    n_samples: Optional[int] = None,
    seed: Optional[int] = None,
) -> DecayFit:
    """fit ln λ_i on ln i for i in [i_lo, i_hi] (1-based, inclusive)

    Parameters
    ----------
    lambdas : Sequence[float]
        eigenvalues in descending order, λ_1 first
    window : Sequence[int], optional
        (i_lo, i_hi), by default (50, 200)

    Returns
    -------
    DecayFit

    Raises
    ------
    UnreliableSpectrum
        when the window runs past the stored eigenvalues or contains a nonpositive one
    """
    lo, hi = int(window[0]), int(window[1])
    if lo < 1 or hi <= lo:
        raise ValueError(f"invalid fit window {tuple(window)}: need 1 <= i_lo < i_hi")
    lambdas = np.asarray(lambdas, dtype=float)
    if hi > len(lambdas):
        raise UnreliableSpectrum(
            f"window exceeds reliable spectrum: i_hi = {hi} but only {len(lambdas)} eigenvalues kept"
        )
    index = np.arange(lo, hi + 1)
    slope, intercept, r2 = _loglog_fit(index, lambdas[lo - 1 : hi], window)
    return DecayFit(
        rate=-slope, slope=slope, intercept=intercept, window=(lo, hi), r2=r2, n_samples=n_samples, seed=seed
    )


def fit_mode_decay(spectrum: ModeSpectrum, window: Sequence[int] = (10, 60)) -> DecayFit:
    """fit ln μ_n on ln n over the degree window; for the NTK on S^d the slope is close to -(d+1)"""
    lo, hi = int(window[0]), int(window[1])
    if lo < 1 or hi <= lo or hi > spectrum.n_max:
        raise ValueError(f"invalid degree window {tuple(window)} for modes up to degree {spectrum.n_max}")
    index = np.arange(lo, hi + 1)
    slope, intercept, r2 = _loglog_fit(index, spectrum.mu[lo : hi + 1], window)
    return DecayFit(rate=-slope, slope=slope, intercept=intercept, window=(lo, hi), r2=r2)


# ==============================================================================
# // experiments
# ==============================================================================

def cell_name(distribution: str, d: int, L: int) -> str:
    return f"{distribution}_d{d}_L{L}"


def edr_cell(
    distribution: str,
    d: int,
    L: int,
    n: int = 1000,
    window: Sequence[int] = DEFAULT_WINDOW,
    n_seeds: int = 3,
    root_seed: int = 0,
) -> tuple[dict, np.ndarray]:
    """decay rate of K^NT for one (distribution, d, L), averaged over n_seeds samples

    Each repetition draws from its own substream keyed by (distribution, d, L, repetition),
    so the result does not depend on which other cells run.

    Returns
    -------
    tuple[dict, np.ndarray]
        the table row and the eigenvalues averaged over repetitions (truncated to the shortest)
    """
    dist = make_distribution(distribution, d)
    desc = NtkDescriptor(L=L)
    rates, spectra = [], []
    for rep in range(n_seeds):
        rng = substream(root_seed, distribution, d, L, rep, "sample")
        X = sample(dist, n, rng=rng)
        lambdas = empirical_eigenvalues(desc, X)
        rates.append(fit_decay(lambdas, window, n_samples=n, seed=rep).rate)
        spectra.append(lambdas)
    length = min(len(s) for s in spectra)
    mean_spectrum = np.mean([s[:length] for s in spectra], axis=0)
    row = {
        "distribution": distribution,
        "d": d,
        "L": L,
        "r_mean": float(np.mean(rates)),
        "r_std": float(np.std(rates, ddof=1)) if n_seeds > 1 else 0.0,
        "r_theory": theoretical_rate(d),
        "n": n,
        "window_lo": int(window[0]),
        "window_hi": int(window[1]),
        "seeds": n_seeds,
    }
    logger.info("edr cell finished", extra={"cell": cell_name(distribution, d, L), "r_mean": row["r_mean"]})
    return row, mean_spectrum


def edr_experiment(
    distributions: Sequence[str] = tuple(DISTRIBUTIONS),
    dims: Sequence[int] = (3, 4, 5),
    layers: Sequence[int] = (2, 3, 4),
    n: int = 1000,
    window: Sequence[int] = DEFAULT_WINDOW,
    n_seeds: int = 3,
    root_seed: int = 0,
    n_workers: int = 1,
) -> tuple[pd.DataFrame, dict[str, np.ndarray]]:
    """the distribution × d × L grid of decay rates

    Returns
    -------
    tuple[pd.DataFrame, dict[str, np.ndarray]]
        one row per cell (distribution, d, L, r_mean, r_std, r_theory, n,
        window_lo, window_hi, seeds) and the mean spectrum of each cell keyed by `cell_name`
    """
    for name in distributions:
        if name not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {name}. Expected one of: {list(DISTRIBUTIONS)}")
    cells = list(itertools.product(distributions, dims, layers))
    args = [(dist, d, L, n, tuple(window), n_seeds, root_seed) for dist, d, L in cells]
    if n_workers > 1 and len(cells) > 1:
        p = multiprocessing.Pool(min(n_workers, len(cells)))
        results = p.starmap(edr_cell, args)
        p.close()
        p.join()
    else:
        results = [edr_cell(*a) for a in args]
    table = pd.DataFrame([row for row, _ in results])
    spectra = {cell_name(dist, d, L): spectrum for (dist, d, L), (_, spectrum) in zip(cells, results)}
    return table, spectra


def restricted_sphere_edr(
    desc: NtkDescriptor,
    d: int,
    cap_angle: float,
    n: int = 1000,
    window: Sequence[int] = DEFAULT_WINDOW,
    seed: int = 0,
) -> DecayFit:
    """decay rate of the homogeneous NTK under the uniform measure on a spherical cap"""
    if desc.variant != "homogeneous":
        raise ValueError("restricted_sphere_edr needs the homogeneous variant (points already on S^d)")
    dist = SampleDistribution(kind="sphere_cap", d=d, seed=seed, cap_angle=cap_angle)
    X = sample(dist, n)
    return fit_decay(empirical_eigenvalues(desc, X), window, n_samples=n, seed=seed)


def sum_stability_probe(
    distribution: str,
    d: int,
    L: int,
    n: int = 1000,
    window: Sequence[int] = DEFAULT_WINDOW,
    seed: int = 0,
) -> tuple[float, float]:
    """decay rates of K^NT without and with the constant kernel 1, on the same sample"""
    X = sample(make_distribution(distribution, d, seed=seed), n)
    r_without = fit_decay(empirical_eigenvalues(NtkDescriptor(L=L, include_bias_constant=False), X), window).rate
    r_with = fit_decay(empirical_eigenvalues(NtkDescriptor(L=L, include_bias_constant=True), X), window).rate
    return r_without, r_with
