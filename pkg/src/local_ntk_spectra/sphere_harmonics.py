"""
Gegenbauer polynomials, zonal multiplicities and Funk–Hecke mode extraction
for dot-product kernels on the sphere S^d ⊂ R^{d+1}

Modes are taken with respect to the normalized uniform measure on S^d, so that
a dot-product kernel k(x, y) = f(<x, y>) expands as
f(u) = Σ_n μ_n a_n C_n^λ(u) / C_n^λ(1), and in particular Σ_n μ_n a_n = f(1).
"""
import logging
import math
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from attrs import field, frozen, validators
from scipy.special import binom, gamma, roots_jacobi

from local_ntk_spectra.ntk_kernels import NtkDescriptor, ntk_profile
from local_ntk_spectra.seq_calculus import binomial_weight
from local_ntk_utils.errors import QuadratureNotConverged
from local_ntk_utils.general_utils import header_from_meta, meta_from_header, write_csv

logger = logging.getLogger(__name__)

MAX_RECURRENCE_DEGREE = 200
QUADRATURE_RULES = ["gauss_jacobi", "angular"]


# ==============================================================================
# // types
# ==============================================================================

def _check_dimension(instance, attribute, value):
    if value < 2:
        raise ValueError(f"invalid dimension: the Gegenbauer path needs d >= 2, got d={value}")


@frozen
class SphereGeometry:
    """the sphere S^d ⊂ R^{d+1}

    Attributes:
    `d`: int
        sphere dimension, >= 2
    """
    d: int = field(converter=int, validator=_check_dimension)

    @property
    def lam(self) -> float:
        """Gegenbauer index λ = (d-1)/2"""
        return (self.d - 1) / 2

    @property
    def omega(self) -> float:
        """surface area of S^d"""
        return 2 * np.pi ** ((self.d + 1) / 2) / gamma((self.d + 1) / 2)

    @property
    def funk_hecke_constant(self) -> float:
        """c_d = ω_{d-1}/ω_d = 1/∫(1-t²)^{(d-2)/2} dt"""
        return gamma((self.d + 1) / 2) / (np.sqrt(np.pi) * gamma(self.d / 2))


@frozen(eq=False)
class ModeSpectrum:
    """per-degree eigenvalues μ_n (n = 0..N_max) of a dot-product kernel with multiplicities a_n"""
    mu: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=float))
    geometry: SphereGeometry = field(validator=validators.instance_of(SphereGeometry))
    mult: np.ndarray = field()

    @mult.default
    def _default_mult(self):
        return np.array([multiplicity(n, self.geometry.d) for n in range(len(self.mu))], dtype=np.int64)

    def __attrs_post_init__(self):
        if len(self.mult) != len(self.mu):
            raise ValueError(f"{len(self.mu)} modes but {len(self.mult)} multiplicities")
        negative = self.negative_modes()
        if len(negative) > 0:
            logger.warning(
                "negative modes stored, the profile is not positive definite on this sphere",
                extra={"degrees": negative.tolist()[:10], "d": self.geometry.d},
            )

    @property
    def n_max(self) -> int:
        return len(self.mu) - 1

    def negative_modes(self, rtol: float = 1e-12) -> np.ndarray:
        """degrees with μ_n below -rtol·max|μ|"""
        floor = rtol * np.max(np.abs(self.mu)) if len(self.mu) else 0.0
        return np.nonzero(self.mu < -floor)[0]

    def trace(self, n: Optional[int] = None) -> float:
        """Σ_{k<=n} μ_k a_k"""
        if n is None:
            n = self.n_max
        return float(np.sum(self.mu[: n + 1] * self.mult[: n + 1]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"n": np.arange(len(self.mu)), "a_n": self.mult, "mu_n": self.mu})

    def to_csv(self, output_file: str | Path) -> Path:
        return write_csv(self.to_frame(), output_file, header_lines=header_from_meta({"d": self.geometry.d}))

    @classmethod
    def from_csv(cls, csv_file: str | Path, d: Optional[int] = None) -> "ModeSpectrum":
        """the sphere dimension is read from the `# d=...` header unless given"""
        if d is None:
            with open(csv_file) as f:
                first = f.readline()
            if not first.startswith("#"):
                raise ValueError(f"{csv_file} has no metadata header, pass d explicitly")
            d = int(meta_from_header(first)["d"])
        df = pd.read_csv(csv_file, comment="#")
        return cls(mu=df["mu_n"].to_numpy(), geometry=SphereGeometry(d), mult=df["a_n"].to_numpy())


# ==============================================================================
# // multiplicities
# ==============================================================================

def multiplicity(n: int, d: int) -> int:
    """dimension a_n of the degree-n spherical harmonics on S^d"""
    if n < 0:
        raise ValueError(f"degree must be >= 0, got {n}")
    if n == 0:
        return 1
    if n == 1:
        return d + 1
    return math.comb(n + d, n) - math.comb(n - 2 + d, n - 2)


def multiplicity_count(N: int, d: int) -> int:
    """Σ_{n<=N} a_n = C(N+d, N) + C(N-1+d, N-1)"""
    if N == 0:
        return 1
    return math.comb(N + d, N) + math.comb(N - 1 + d, N - 1)


# ==============================================================================
# // Gegenbauer polynomials
# ==============================================================================

def gegenbauer_table(n_max: int, lam: float, u) -> np.ndarray:
    """C_n^λ(u) for n = 0..n_max by the three-term recurrence

    n C_n = 2(n+λ-1) u C_{n-1} - (n+2λ-2) C_{n-2}, accumulated in extended precision.

    Returns
    -------
    np.ndarray
        shape (n_max+1,) + shape(u)
    """
    if n_max > MAX_RECURRENCE_DEGREE:
        raise ValueError(
            f"degree {n_max} above recurrence guard {MAX_RECURRENCE_DEGREE}: upward recurrence is unreliable there"
        )
    if n_max < 0:
        raise ValueError(f"degree must be >= 0, got {n_max}")
    if lam <= 0:
        raise ValueError(f"Gegenbauer index must be positive, got {lam}")
    u = np.asarray(u, dtype=np.longdouble)
    lam = np.longdouble(lam)
    table = np.empty((n_max + 1,) + u.shape, dtype=np.longdouble)
    table[0] = 1
    if n_max >= 1:
        table[1] = 2 * lam * u
    for n in range(2, n_max + 1):
        table[n] = (2 * (n + lam - 1) * u * table[n - 1] - (n + 2 * lam - 2) * table[n - 2]) / n
    return table.astype(float)


def gegenbauer(n: int, lam: float, u):
    """C_n^λ(u)"""
    value = gegenbauer_table(n, lam, u)[n]
    return float(value) if np.ndim(value) == 0 else value


def gegenbauer_at_one(n: int, lam: float) -> float:
    """C_n^λ(1) = (2λ)_n / n!"""
    return float(binom(n + 2 * lam - 1, n))


def zonal(n: int, geometry: SphereGeometry, u):
    """Z_n(u) = ((n+λ)/λ) C_n^λ(u); Z_n(1) = a_n"""
    lam = geometry.lam
    return (n + lam) / lam * gegenbauer(n, lam, u)


# ==============================================================================
# // Funk–Hecke modes
# ==============================================================================

def quadrature_rule(
    geometry: SphereGeometry,
    order: int,
    rule: Literal["gauss_jacobi", "angular"] = "gauss_jacobi",
) -> tuple[np.ndarray, np.ndarray]:
    """nodes t and weights w with Σ w g(t) ≈ ∫_{-1}^{1} g(t)(1-t²)^{(d-2)/2} dt

    `gauss_jacobi` uses Gauss–Jacobi nodes with exponents ((d-2)/2, (d-2)/2).
    `angular` uses Gauss–Legendre nodes in θ = arccos t on [0, π] with weight
    sin^{d-1}θ; profiles built from arccos (all the NTK profiles) are analytic in θ,
    so this rule converges much faster than the polynomial one.
    """
    if rule not in QUADRATURE_RULES:
        raise ValueError(f"unknown quadrature rule {rule}. Expected one of: {QUADRATURE_RULES}")
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    if rule == "gauss_jacobi":
        alpha = (geometry.d - 2) / 2
        nodes, weights = roots_jacobi(order, alpha, alpha)
        return nodes, weights
    x, w = np.polynomial.legendre.leggauss(order)
    theta = np.pi * (x + 1) / 2
    return np.cos(theta), w * (np.pi / 2) * np.sin(theta) ** (geometry.d - 1)


def _funk_hecke_pass(profile, geometry, n_max, quad_order, rule) -> np.ndarray:
    nodes, weights = quadrature_rule(geometry, quad_order, rule)
    lam = geometry.lam
    normalized = gegenbauer_table(n_max, lam, nodes)
    normalized /= np.array([gegenbauer_at_one(n, lam) for n in range(n_max + 1)])[:, None]
    values = np.asarray(profile(nodes), dtype=float)
    return geometry.funk_hecke_constant * (normalized @ (weights * values))


def funk_hecke_modes(
    profile: Callable[[np.ndarray], np.ndarray],
    geometry: SphereGeometry,
    n_max: int,
    quad_order: int = 256,
    rule: Literal["gauss_jacobi", "angular"] = "gauss_jacobi",
    rtol: float = 1e-8,
    atol_scale: float = 1e-12,
) -> ModeSpectrum:
    """μ_n = c_d ∫ f(t) C_n^λ(t)/C_n^λ(1) (1-t²)^{(d-2)/2} dt for n <= n_max

    The integral is evaluated at quad_order and again at 2·quad_order; the two
    passes must agree to rtol·|μ_n| + atol_scale·max|μ| for every degree.

    Parameters
    ----------
    profile : Callable[[np.ndarray], np.ndarray]
        vectorized profile f on [-1, 1]
    geometry : SphereGeometry
    n_max : int
        largest degree, <= 200
    quad_order : int, optional
        number of nodes of the first pass, by default 256
    rule : Literal["gauss_jacobi", "angular"], optional
        see `quadrature_rule`, by default "gauss_jacobi"
    rtol : float, optional
        relative agreement of the two passes, by default 1e-8
    atol_scale : float, optional
        absolute floor relative to the largest mode, so that vanishing modes pass, by default 1e-12

    Returns
    -------
    ModeSpectrum
        modes of the finer pass

    Raises
    ------
    QuadratureNotConverged
        when the doubling check fails
    """
    coarse = _funk_hecke_pass(profile, geometry, n_max, quad_order, rule)
    fine = _funk_hecke_pass(profile, geometry, n_max, 2 * quad_order, rule)
    gap = np.abs(coarse - fine)
    tolerance = rtol * np.abs(fine) + atol_scale * np.max(np.abs(fine))
    failing = np.nonzero(gap > tolerance)[0]
    if len(failing) > 0:
        n = int(failing[0])
        raise QuadratureNotConverged(
            f"quadrature not converged at degree {n}: |Δμ_n| = {gap[n]:.3e} between {quad_order} and "
            f"{2 * quad_order} nodes ({rule} rule)",
            degree=n,
        )
    logger.debug(
        "funk-hecke modes converged",
        extra={"d": geometry.d, "n_max": n_max, "quad_order": quad_order, "rule": rule, "max_gap": float(gap.max())},
    )
    return ModeSpectrum(mu=fine, geometry=geometry)


def ntk_sphere_modes(
    L: int,
    d: int,
    n_max: int,
    quad_order: int = 256,
    rule: Literal["gauss_jacobi", "angular"] = "angular",
) -> ModeSpectrum:
    """Funk–Hecke modes of the homogeneous NTK profile with L hidden layers on S^d"""
    desc = NtkDescriptor(L=L, variant="homogeneous")
    return funk_hecke_modes(
        lambda u: ntk_profile(desc, u), SphereGeometry(d), n_max, quad_order=quad_order, rule=rule
    )


def modes_to_lambda(spectrum: ModeSpectrum, count: int) -> np.ndarray:
    """expand every μ_n with multiplicity a_n and return the `count` largest, descending"""
    floor = 1e-12 * np.max(np.abs(spectrum.mu))
    if np.any(spectrum.mu < -floor):
        raise ValueError(f"modes_to_lambda needs nonnegative modes, negative at degrees {spectrum.negative_modes()}")
    total = int(np.sum(spectrum.mult))
    if total < count:
        raise ValueError(
            f"insufficient stored degrees: {total} eigenvalues up to degree {spectrum.n_max}, {count} requested"
        )
    expanded = np.repeat(np.clip(spectrum.mu, 0, None), spectrum.mult)
    return np.sort(expanded)[::-1][:count]


# ==============================================================================
# // Cesàro kernel
# ==============================================================================

def cesaro_kernel(n: int, geometry: SphereGeometry, u):
    """K_n(u) = (1/A_n^d) Σ_{k<=n} A_{n-k}^d Z_k(u), the order-d Cesàro mean of the zonal polynomials"""
    if n < 1:
        raise ValueError(f"Cesàro kernel needs n >= 1, got {n}")
    d, lam = geometry.d, geometry.lam
    table = gegenbauer_table(n, lam, u)
    weights = np.array(
        [float(binomial_weight(n - k, d)) * (k + lam) / lam for k in range(n + 1)]
    )
    value = np.tensordot(weights, table, axes=1) / float(binomial_weight(n, d))
    return float(value) if np.ndim(value) == 0 else value


def cesaro_envelope(n: int, geometry: SphereGeometry, u):
    """K_n(u) · n · (1 - u + n⁻²)^{λ+1}, bounded uniformly in n and u"""
    u = np.asarray(u, dtype=float)
    return cesaro_kernel(n, geometry, u) * n * (1 - u + n**-2.0) ** (geometry.lam + 1)
