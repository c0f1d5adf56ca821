"""
closed-form neural tangent kernel of the mirrored fully-connected ReLU network

K^NT(x, x') = ‖x̃‖‖x̃'‖ K^NT_0(ū) + 1, with x̃ = (x, 1) and ū the cosine between x̃, x̃'.
K^NT_0(u) = Σ_{r=0}^{L} κ1^{(r)}(u) Π_{s=r}^{L-1} κ0(κ1^{(s)}(u)) is the homogeneous
profile, built from the arc-cosine kernels κ0 and κ1.

Kernels are plain callables ``k(X, Z) -> matrix`` so they compose
(`scaled_kernel`, `pullback_kernel`, `sum_kernel`).
"""
import logging
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
import scipy.linalg
from attrs import define, field, frozen, validators
from scipy.special import poch

from local_ntk_utils.errors import NotPositiveDefinite
from local_ntk_utils.general_utils import header_from_meta, write_csv

logger = logging.getLogger(__name__)

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]

CLAMP_TOLERANCE = 1e-9
ENDPOINT_TOLERANCE = 1e-14


# ==============================================================================
# // descriptor and lifted points
# ==============================================================================

@frozen
class NtkDescriptor:
    """which NTK to evaluate

    Attributes:
    `L`: int
        number of hidden layers, >= 1
    `variant`: Literal["full", "homogeneous"]
        `full`: K^NT on R^d. `homogeneous`: the profile K^NT_0 on S^d.
        Default: "full"
    `include_bias_constant`: bool
        add the constant 1 of the output bias. Always False for `homogeneous`.
        Default: True for `full`, False for `homogeneous`
    `activation`: Literal["relu"]
        reserved for other homogeneous activations. Default: "relu"
    """
    L: int = field(converter=int, validator=validators.ge(1))
    variant: Literal["full", "homogeneous"] = field(
        default="full", validator=validators.in_(["full", "homogeneous"])
    )
    include_bias_constant: bool = field()
    activation: Literal["relu"] = field(default="relu", validator=validators.in_(["relu"]))

    @include_bias_constant.default
    def _default_bias(self):
        return self.variant == "full"

    @include_bias_constant.validator
    def _check_bias(self, attribute, value):
        if value and self.variant == "homogeneous":
            raise ValueError("the homogeneous NTK never includes the bias constant")


@frozen(eq=False)
class LiftedPoints:
    """points x ∈ R^d with x̃ = (x, 1), ‖x̃‖ and y = x̃/‖x̃‖ on the upper half sphere (one row per point)"""
    x: np.ndarray
    x_tilde: np.ndarray
    norm_tilde: np.ndarray
    y: np.ndarray


def lift(X) -> LiftedPoints:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input coordinates")
    x_tilde = np.hstack([X, np.ones((X.shape[0], 1))])
    norm_tilde = np.sqrt(np.sum(X**2, axis=1) + 1)
    return LiftedPoints(x=X, x_tilde=x_tilde, norm_tilde=norm_tilde, y=x_tilde / norm_tilde[:, None])


# ==============================================================================
# // arc-cosine kernels
# ==============================================================================

def _clamp(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u) > 1 + CLAMP_TOLERANCE):
        worst = float(np.max(np.abs(u)))
        raise ValueError(f"argument out of range: |u| = {worst} > 1 + {CLAMP_TOLERANCE}")
    return np.clip(u, -1.0, 1.0)


def _scalar_or_array(value):
    return float(value) if np.ndim(value) == 0 else value


def kappa0(u):
    """κ0(u) = (π - arccos u)/π"""
    u = _clamp(u)
    value = (np.pi - np.arccos(u)) / np.pi
    value = np.where(np.abs(1 - u) < ENDPOINT_TOLERANCE, 1.0, value)
    value = np.where(np.abs(1 + u) < ENDPOINT_TOLERANCE, 0.0, value)
    return _scalar_or_array(value)


def kappa1(u):
    """κ1(u) = (√(1-u²) + u(π - arccos u))/π"""
    u = _clamp(u)
    value = (np.sqrt(np.maximum(1 - u**2, 0.0)) + u * (np.pi - np.arccos(u))) / np.pi
    value = np.where(np.abs(1 - u) < ENDPOINT_TOLERANCE, 1.0, value)
    value = np.where(np.abs(1 + u) < ENDPOINT_TOLERANCE, 0.0, value)
    return _scalar_or_array(value)


def kappa0_series(u, n_terms: int = 60):
    """κ0(u) = 1/2 + (1/π) Σ_r (1/2)_r / ((2r+1) r!) u^{2r+1}"""
    u = np.asarray(u, dtype=float)
    r = np.arange(n_terms)
    coef = poch(0.5, r) / ((2 * r + 1) * poch(1.0, r))
    return _scalar_or_array(0.5 + np.polynomial.polynomial.polyval(u, _odd(coef)) / np.pi)


def kappa1_series(u, n_terms: int = 60):
    """κ1(u) = 1/π + u/2 + (1/π) Σ_{r>=1} (1/2)_{r-1} / (2(2r-1) r!) u^{2r}"""
    u = np.asarray(u, dtype=float)
    r = np.arange(1, n_terms + 1)
    coef = poch(0.5, r - 1) / (2 * (2 * r - 1) * poch(1.0, r))
    return _scalar_or_array(1 / np.pi + u / 2 + np.polynomial.polynomial.polyval(u, _even(coef)) / np.pi)


def _odd(coef: np.ndarray) -> np.ndarray:
    """coefficients c_r of u^{2r+1} -> dense power-series coefficients"""
    dense = np.zeros(2 * len(coef))
    dense[1::2] = coef
    return dense


def _even(coef: np.ndarray) -> np.ndarray:
    """coefficients c_r of u^{2r}, r >= 1 -> dense power-series coefficients"""
    dense = np.zeros(2 * len(coef) + 1)
    dense[2::2] = coef
    return dense


# ==============================================================================
# // NTK
# ==============================================================================

def _homogeneous_profile(L: int, u) -> np.ndarray:
    u = _clamp(u)
    k1 = u
    ntk = u
    for _ in range(L):
        ntk = ntk * kappa0(k1)
        k1 = kappa1(k1)
        ntk = ntk + k1
    return np.asarray(ntk, dtype=float)


def ntk_profile(desc: NtkDescriptor, u):
    """homogeneous profile K^NT_0(u); K^NT_0(1) = L + 1"""
    if desc.variant != "homogeneous":
        raise ValueError("ntk_profile needs the homogeneous variant")
    return _scalar_or_array(_homogeneous_profile(desc.L, u))


def ntk_matrix(desc: NtkDescriptor, X, Z) -> np.ndarray:
    """cross kernel matrix K(X, Z)

    full: rows of X, Z are points of R^d, lifted internally.
    homogeneous: rows are points of S^d; the matrix is K^NT_0(<x, z>).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if desc.variant == "homogeneous":
        return _homogeneous_profile(desc.L, X @ Z.T)
    lx, lz = lift(X), lift(Z)
    u = lx.y @ lz.y.T
    K = np.outer(lx.norm_tilde, lz.norm_tilde) * _homogeneous_profile(desc.L, u)
    if desc.include_bias_constant:
        K = K + 1.0
    return K


def ntk_eval(desc: NtkDescriptor, x, x2) -> float:
    """K^NT(x, x') for two points of R^d"""
    if desc.variant != "full":
        raise ValueError("ntk_eval needs the full variant")
    return float(ntk_matrix(desc, np.atleast_2d(x), np.atleast_2d(x2))[0, 0])


# ==============================================================================
# // kernel algebra
# ==============================================================================

def ntk_kernel(desc: NtkDescriptor) -> Kernel:
    def k(X, Z):
        return ntk_matrix(desc, X, Z)
    return k


def dot_product_kernel(profile: Callable) -> Kernel:
    """k(x, z) = f(<x, z>) for points on a sphere"""
    def k(X, Z):
        X, Z = np.atleast_2d(X), np.atleast_2d(Z)
        return np.asarray(profile(_clamp(X @ Z.T)), dtype=float)
    return k


def constant_kernel(c: float = 1.0) -> Kernel:
    def k(X, Z):
        return np.full((np.atleast_2d(X).shape[0], np.atleast_2d(Z).shape[0]), float(c))
    return k


def scaled_kernel(k: Kernel, rho: Callable[[np.ndarray], np.ndarray]) -> Kernel:
    """(ρ ⊙ k)(x, x') = ρ(x) k(x, x') ρ(x')"""
    def scaled(X, Z):
        rx = np.asarray(rho(np.atleast_2d(X)), dtype=float)
        rz = np.asarray(rho(np.atleast_2d(Z)), dtype=float)
        if not (np.all(np.isfinite(rx)) and np.all(np.isfinite(rz))):
            raise ValueError("scaling function is not finite on the sample")
        return rx[:, None] * k(X, Z) * rz[None, :]
    return scaled


def pullback_kernel(k2: Kernel, phi: Callable[[np.ndarray], np.ndarray]) -> Kernel:
    """(φ*k2)(x, x') = k2(φ(x), φ(x'))"""
    def pulled(X, Z):
        return k2(phi(np.atleast_2d(X)), phi(np.atleast_2d(Z)))
    return pulled


def sphere_lift(X) -> np.ndarray:
    """Φ(x) = x̃/‖x̃‖"""
    return lift(X).y


def lifted_norm(X) -> np.ndarray:
    return lift(X).norm_tilde


def sum_kernel(k1: Kernel, k2: Kernel) -> Kernel:
    def summed(X, Z):
        return k1(X, Z) + k2(X, Z)
    return summed


# ==============================================================================
# // Gram matrices
# ==============================================================================

@define(eq=False)
class KernelMatrix:
    """symmetric Gram matrix with a cached symmetric eigendecomposition"""
    entries: np.ndarray
    meta: dict = field(factory=dict)
    _eigen: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)
    lambda_min: Optional[float] = field(default=None)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """(eigenvalues descending, orthonormal eigenvectors as columns)"""
        if self._eigen is None:
            vals, vecs = scipy.linalg.eigh(self.entries)
            self._eigen = (vals[::-1].copy(), vecs[:, ::-1].copy())
            self.lambda_min = float(vals[0])
        return self._eigen

    def eigvals(self) -> np.ndarray:
        if self._eigen is not None:
            return self._eigen[0]
        vals = scipy.linalg.eigvalsh(self.entries)
        self.lambda_min = float(vals[0])
        return vals[::-1].copy()

    def check_positive_definite(self, rtol: float = 0.0) -> float:
        """records and returns λ_min; raises when λ_min <= rtol·trace"""
        vals = self.eigvals()
        threshold = rtol * float(np.trace(self.entries))
        if vals[-1] <= threshold:
            raise NotPositiveDefinite(
                f"Gram not PD: λ_min = {vals[-1]:.3e} <= {threshold:.3e}", lambda_min=float(vals[-1])
            )
        return float(vals[-1])

    def to_csv(self, output_file: str | Path) -> Path:
        """row-major dump with a metadata header (d, L, n, seed when known)"""
        meta = {"n": self.n, **self.meta}
        df = pd.DataFrame(self.entries, columns=[f"c{j}" for j in range(self.n)])
        return write_csv(df, output_file, header_lines=header_from_meta(meta))


def gram(desc_or_kernel: NtkDescriptor | Kernel, X, meta: Optional[dict] = None) -> KernelMatrix:
    """K(X, X), symmetrized as (K + Kᵀ)/2"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input coordinates")
    d = X.shape[1]
    if isinstance(desc_or_kernel, NtkDescriptor):
        K = ntk_matrix(desc_or_kernel, X, X)
        meta = {"L": desc_or_kernel.L, **(meta or {})}
        if desc_or_kernel.variant == "homogeneous":
            # rows already live on S^d in R^{d+1}
            d = X.shape[1] - 1
    else:
        K = np.asarray(desc_or_kernel(X, X), dtype=float)
    K = (K + K.T) / 2
    return KernelMatrix(entries=K, meta={"d": d, **(meta or {})})


def weyl_sum_bound_holds(A: np.ndarray, B: np.ndarray, atol: float = 1e-10) -> bool:
    """λ_{i+j-1}(A+B) <= λ_i(A) + λ_j(B) for every admissible i, j (eigenvalues descending)"""
    la = scipy.linalg.eigvalsh(A)[::-1]
    lb = scipy.linalg.eigvalsh(B)[::-1]
    lab = scipy.linalg.eigvalsh(A + B)[::-1]
    n = len(lab)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    admissible = i + j < n
    lhs = lab[np.where(admissible, i + j, 0)]
    rhs = la[i] + lb[j]
    return bool(np.all((lhs <= rhs + atol)[admissible]))
