"""
sequence calculus behind the eigenvalue decay condition

Sequences are finite prefixes of infinite real sequences, indexed from 0.
Conventions used throughout:

- forward difference: (Δa)_k = a_k - a_{k+1}
- tail sum: (Sa)_k = Σ_{r >= k} a_r (finite support only), so SΔ = ΔS = id
- binomial weights: A_k^p = C(k+p, k)
- Cesàro mean: s_n^p = (1/A_n^p) Σ_{k<=n} A_{n-k}^p a_k

Integer or `fractions.Fraction` inputs stay exact through every operation in
this module; floats stay floats.
"""
import logging
import math
from fractions import Fraction
from typing import Literal, Optional, Sequence

import numpy as np
from attrs import field, frozen, validators

logger = logging.getLogger(__name__)

EXACT_BINOMIAL_LIMIT = 60
TAIL_KINDS = ["power", "exponential", "log_power"]


# ==============================================================================
# // sequence types
# ==============================================================================

@frozen
class TailModel:
    """declared analytic tail of a sequence

    Attributes:
    `kind`: Literal["power", "exponential", "log_power"]
        power: c0 (k+1)^{-beta}
        exponential: c0 exp(-c1 k^beta)
        log_power: c0 (k+2)^{-beta} ln(k+2)^p
    `beta`: float
    `c0`: float, Default: 1.0
    `c1`: float, only used by `exponential`. Default: 1.0
    `p`: float, only used by `log_power`. Default: 0.0
    """
    kind: Literal["power", "exponential", "log_power"] = field(validator=validators.in_(TAIL_KINDS))
    beta: float = field(converter=float)
    c0: float = field(default=1.0, converter=float, validator=validators.gt(0))
    c1: float = field(default=1.0, converter=float)
    p: float = field(default=0.0, converter=float)

    def admissible(self, d: int) -> bool:
        """parameter ranges for which the family satisfies the decay condition in dimension d"""
        if self.kind == "power":
            return self.beta > d
        if self.kind == "exponential":
            return self.c1 > 0 and self.beta > 0
        return self.beta > d or (self.beta == d and self.p > 1)

    def evaluate(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        if self.kind == "power":
            return self.c0 * (k + 1) ** (-self.beta)
        if self.kind == "exponential":
            return self.c0 * np.exp(-self.c1 * k**self.beta)
        return self.c0 * (k + 2) ** (-self.beta) * np.log(k + 2) ** self.p


@frozen
class Seq:
    """finite prefix of a sequence

    Attributes:
    `values`: tuple
        a_0, a_1, ..., at least one entry
    `support`: Optional[int]
        declared support length s: a_k = 0 for every k >= s (entries of `values`
        past s must be 0). None means the sequence continues unknown past the prefix.
    `tail_model`: Optional[TailModel]
        declared analytic tail, only used by the condition checker
    `d`: Optional[int]
        dimension the tail model is checked against at construction
    """
    values: tuple = field(converter=tuple)
    support: Optional[int] = field(default=None)
    tail_model: Optional[TailModel] = field(default=None)
    d: Optional[int] = field(default=None)

    @values.validator
    def _check_values(self, attribute, value):
        if len(value) < 1:
            raise ValueError("a sequence needs at least one stored value")

    @support.validator
    def _check_support(self, attribute, value):
        if value is None:
            return
        if not 0 <= value <= len(self.values):
            raise ValueError(
                f"declared support {value} outside the stored prefix of length {len(self.values)}"
            )
        if any(v != 0 for v in self.values[value:]):
            raise ValueError(f"nonzero values stored past the declared support {value}")

    def __attrs_post_init__(self):
        if self.tail_model is not None and self.d is not None:
            if not self.tail_model.admissible(self.d):
                raise ValueError(
                    f"tail model {self.tail_model} is not admissible for d={self.d}"
                )

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]

    @classmethod
    def finite(cls, values: Sequence) -> "Seq":
        """finitely supported sequence whose support is the whole prefix"""
        return cls(values, support=len(values))

    @classmethod
    def from_tail_model(cls, model: TailModel, length: int, d: Optional[int] = None) -> "Seq":
        values = [float(v) for v in model.evaluate(np.arange(length))]
        return cls(values, tail_model=model, d=d)

    def as_array(self) -> np.ndarray:
        return np.asarray([float(v) for v in self.values])


@frozen
class ExtrapolationResult:
    """output of `left_extrapolate`

    `leading` is the first value of `tilde_mu`; `leading_bound` is
    Σ_{l<p} A_N^l Δ^l μ_N, which dominates `leading`.
    """
    tilde_mu: Seq
    residual: Seq
    leading: float
    leading_bound: float
    order_p: int
    pivot_N: int


@frozen
class EdrConditionReport:
    """per-condition results of `check_edr_condition`. Condition (a) is
    asymptotic, so `asymptotic_passed` comes from a finite grid test only.
    """
    d: int
    q: int
    D: float
    n_max: int
    monotone_passed: bool
    monotone_first_violation: Optional[int]
    derivative_bound_passed: bool
    derivative_bound_first_violation: Optional[int]
    asymptotic_passed: bool
    asymptotic_ratios: tuple
    asymptotic_is_heuristic: bool = True

    @property
    def passed(self) -> bool:
        return self.monotone_passed and self.derivative_bound_passed and self.asymptotic_passed


# ==============================================================================
# // helpers
# ==============================================================================

def binomial_weight(k: int, p: int) -> int | float:
    """A_k^p = C(k+p, k)

    exact integer for k+p <= 60, multiplicative recurrence in floating point above.
    """
    if k < 0 or p < 0:
        raise ValueError(f"binomial weight needs k, p >= 0, got k={k}, p={p}")
    if k + p <= EXACT_BINOMIAL_LIMIT:
        return math.comb(k + p, k)
    lo, hi = min(k, p), max(k, p)
    w = 1.0
    for j in range(1, lo + 1):
        w *= (hi + j) / j
    return w


def _exact_ratio(num, den):
    if isinstance(den, int) and isinstance(num, (int, Fraction)):
        r = Fraction(num) / den
        return r.numerator if r.denominator == 1 else r
    return num / den


def _differences(values: Sequence, p: int) -> list[list]:
    """[Δ^0 a, Δ^1 a, ..., Δ^p a] on the prefix, each one entry shorter than the last"""
    out = [list(values)]
    for _ in range(p):
        prev = out[-1]
        out.append([prev[k] - prev[k + 1] for k in range(len(prev) - 1)])
    return out


# ==============================================================================
# // operators
# ==============================================================================

def forward_difference(a: Seq, p: int) -> Seq:
    """p-th forward difference Δ^p a

    Without declared support the result is the prefix of length len(a)-p.
    With declared support the sequence is zero past the prefix, so the
    result keeps the full length and the same support.
    """
    if p < 0:
        raise ValueError(f"difference order must be >= 0, got {p}")
    if a.support is not None:
        padded = list(a.values) + [0] * p
        return Seq(_differences(padded, p)[-1], support=a.support)
    if len(a) <= p:
        raise ValueError(
            f"insufficient sequence length: {len(a)} values cannot give a difference of order {p}"
        )
    return Seq(_differences(a.values, p)[-1])


def tail_sum(a: Seq, p: int) -> Seq:
    """p-fold tail sum S^p a of a finitely supported sequence"""
    if p < 0:
        raise ValueError(f"tail sum order must be >= 0, got {p}")
    if a.support is None:
        raise ValueError("tail sum requires finite support (declare `support`)")
    values = list(a.values)
    for _ in range(p):
        acc = 0
        out = [0] * len(values)
        for k in range(len(values) - 1, -1, -1):
            acc = acc + values[k]
            out[k] = acc
        values = out
    return Seq(values, support=a.support)


def cesaro_mean(a: Seq, p: int, n: int) -> int | Fraction | float:
    """s_n^p = (1/A_n^p) Σ_{k<=n} A_{n-k}^p a_k"""
    if p < 0:
        raise ValueError(f"Cesàro order must be >= 0, got {p}")
    if not 0 <= n < len(a):
        raise ValueError(f"index out of range: n={n} for a sequence of length {len(a)}")
    total = sum(binomial_weight(n - k, p) * a.values[k] for k in range(n + 1))
    return _exact_ratio(total, binomial_weight(n, p))


def summation_by_parts(a: Seq, b: Seq, p: int) -> tuple:
    """both sides of Σ a_k b_k = Σ Δ^{p+1} b_k A_k^p s_k^p

    Parameters
    ----------
    a : Seq
        any sequence covering the support of b
    b : Seq
        finitely supported sequence
    p : int
        Cesàro order

    Returns
    -------
    tuple
        (left-hand side, right-hand side)
    """
    if b.support is None:
        raise ValueError("summation by parts requires b with finite support")
    s = b.support
    if len(a) < s:
        raise ValueError(f"insufficient sequence length: a has {len(a)} values, b has support {s}")
    lhs = sum(a.values[k] * b.values[k] for k in range(s))
    db = forward_difference(b, p + 1).values
    rhs = 0
    for k in range(s):
        # A_k^p s_k^p without the division
        weighted_partial = sum(binomial_weight(k - j, p) * a.values[j] for j in range(k + 1))
        rhs = rhs + db[k] * weighted_partial
    return lhs, rhs


def leading_term_bound(mu: Seq, p: int, N: int):
    """L_N^p μ = Σ_{l<p} A_N^l Δ^l μ_N"""
    diffs = _differences(mu.values, p)
    return sum(binomial_weight(N, l) * diffs[l][N] for l in range(p))


def left_extrapolate(mu: Seq, p: int, N: int, atol: float = 0.0) -> ExtrapolationResult:
    """replace mu below the pivot N by its p-monotone extension with Δ^p = 0 there

    The extension μ̃ agrees with mu for k >= N and satisfies Δ^p μ̃_k = 0 for
    k < N. It is rebuilt downwards from the differences at the pivot:
    Δ^j μ̃_k = Δ^{j+1} μ̃_k + Δ^j μ̃_{k+1}.

    Parameters
    ----------
    mu : Seq
        sequence with Δ^p mu >= 0 on the stored prefix
    p : int
        order, >= 1
    N : int
        pivot, N + p < len(mu)
    atol : float, optional
        tolerance on negative p-th differences for floating point input, by default 0.0

    Returns
    -------
    ExtrapolationResult
    """
    if p < 1:
        raise ValueError(f"extrapolation order must be >= 1, got {p}")
    if N < 0:
        raise ValueError(f"pivot must be >= 0, got {N}")
    if N + p >= len(mu):
        raise ValueError(
            f"insufficient sequence length: need N + p < {len(mu)}, got N={N}, p={p}"
        )
    diffs = _differences(mu.values, p)
    for k, v in enumerate(diffs[p]):
        if v < -atol:
            raise ValueError(f"input not p-monotone: Δ^{p} mu_{k} = {v} < 0")

    # table[j][k] = Δ^j μ̃_k for k <= N
    table = [[0] * (N + 1) for _ in range(p + 1)]
    for j in range(p):
        table[j][N] = diffs[j][N]
    for j in range(p - 1, -1, -1):
        for k in range(N - 1, -1, -1):
            table[j][k] = table[j + 1][k] + table[j][k + 1]

    tilde = list(table[0][:N]) + list(mu.values[N:])
    residual = [mu.values[k] - tilde[k] for k in range(len(mu))]
    return ExtrapolationResult(
        tilde_mu=Seq(tilde, support=mu.support),
        residual=Seq(residual, support=N),
        leading=tilde[0],
        leading_bound=leading_term_bound(mu, p, N),
        order_p=p,
        pivot_N=N,
    )


# ==============================================================================
# // decay condition
# ==============================================================================

def count_above(mu: Seq | np.ndarray, eps: float) -> int:
    """N(eps) = max{n : mu_n > eps} on the stored prefix, -1 if no value exceeds eps"""
    arr = mu.as_array() if isinstance(mu, Seq) else np.asarray(mu, dtype=float)
    above = np.nonzero(arr > eps)[0]
    if len(above) == 0:
        return -1
    return int(above.max())


def _asymptotic_ratio_check(arr: np.ndarray, c: float, ratio_bound: float, eps_grid=None) -> tuple[bool, tuple]:
    last = len(arr) - 1
    if eps_grid is None:
        hi = max(last // 4, 3)
        idx = np.unique(np.geomspace(2, hi, 8).astype(int))
        eps_grid = [arr[i] for i in idx if arr[i] > 0]
    ratios = []
    for eps in eps_grid:
        n_eps = count_above(arr, eps)
        n_ceps = count_above(arr, c * eps)
        # the smaller level runs off the stored prefix
        if n_eps < 0 or n_ceps >= last:
            continue
        ratios.append((n_ceps + 1) / (n_eps + 1))
    if len(ratios) == 0:
        return False, ()
    passed = all(1 <= r <= ratio_bound for r in ratios)
    return passed, tuple(float(r) for r in ratios)


def check_edr_condition(
    mu: Seq,
    d: int,
    q: int,
    D: float,
    n_max: Optional[int] = None,
    eps_grid: Optional[Sequence[float]] = None,
    ratio_c: float = 0.5,
    ratio_bound: float = 16.0,
) -> EdrConditionReport:
    """check the three parts of the eigenvalue decay condition on a prefix

    (b) Δ^{d+1} μ_n >= 0 on the representable range.
    (c) Σ_{l=0}^{d} C(qn+l, l) Δ^l μ_{qn} <= D μ_n for n <= n_max.
    (a) N(c·eps)/N(eps) stays within [1, ratio_bound] on a grid of eps
        (a finite-prefix heuristic, reported as such).

    Parameters
    ----------
    mu : Seq
        the sequence to test, len(mu) >= q * n_max + d + 1
    d : int
        dimension
    q : int
        index scaling of condition (c)
    D : float
        constant of condition (c)
    n_max : Optional[int], optional
        last n checked for condition (c), by default the largest the prefix allows
    eps_grid : Optional[Sequence[float]], optional
        levels for the heuristic check, by default values of mu at geometric indices
    ratio_c : float, optional
        level ratio c of the heuristic check, by default 0.5
    ratio_bound : float, optional
        largest allowed N(c·eps)/N(eps), by default 16.0

    Returns
    -------
    EdrConditionReport
    """
    if d < 1 or q < 1:
        raise ValueError(f"need d >= 1 and q >= 1, got d={d}, q={q}")
    if D <= 0:
        raise ValueError(f"D must be positive, got {D}")
    length = len(mu)
    if n_max is None:
        n_max = (length - d - 1) // q
    if n_max < 0 or length < q * n_max + d + 1:
        raise ValueError(
            f"insufficient sequence length: {length} < q*n_max + d + 1 = {q * max(n_max, 0) + d + 1}"
        )
    diffs = _differences(mu.values, d + 1)

    monotone_violation = next((k for k, v in enumerate(diffs[d + 1]) if v < 0), None)

    bound_violation = None
    for n in range(n_max + 1):
        nq = q * n
        lhs = sum(binomial_weight(nq, l) * diffs[l][nq] for l in range(d + 1))
        if lhs > D * mu.values[n]:
            bound_violation = n
            break

    asymptotic_passed, ratios = _asymptotic_ratio_check(mu.as_array(), ratio_c, ratio_bound, eps_grid)
    report = EdrConditionReport(
        d=d,
        q=q,
        D=float(D),
        n_max=n_max,
        monotone_passed=monotone_violation is None,
        monotone_first_violation=monotone_violation,
        derivative_bound_passed=bound_violation is None,
        derivative_bound_first_violation=bound_violation,
        asymptotic_passed=asymptotic_passed,
        asymptotic_ratios=ratios,
    )
    logger.debug("decay condition check", extra={"d": d, "q": q, "D": float(D), "passed": report.passed})
    return report
